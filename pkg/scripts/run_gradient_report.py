#!/usr/bin/env python3
"""Layer-sensitivity demo: accumulate gradients over a synthetic
translation probe and print per-layer nuclear norms of Q/K/V as CSV
plus ASCII bars."""
import argparse
from pathlib import Path

from forge.sensitivity import ascii_bars, layer_gradient_report, report_to_csv
from forge.synth import SynthLangSpec, gen_translation_corpus, make_batches
from forge.tinylm import ModelConfig, init, load_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", default=None,
                        help="model checkpoint dir (default: fresh seeded init)")
    parser.add_argument("--layers", type=int, default=8)
    parser.add_argument("--batches", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out/gradient_report.csv")
    parser.add_argument("--per-batch", action="store_true")
    args = parser.parse_args()

    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        config = ModelConfig(n_layers=args.layers, d_model=64, n_heads=4,
                             d_ff=256, vocab_size=64, max_seq_len=32,
                             init_seed=1234 + args.seed)
        params = init(config)

    spec = SynthLangSpec(vocab_size=params.config.vocab_size, perm_seed=5)
    train, _ = gen_translation_corpus(spec, args.batches * 8, seed=args.seed + 7)
    batches = make_batches(train, 8)[:args.batches]

    report = layer_gradient_report(params, batches, dataset_id="synthetic-translation",
                                   seed=args.seed, accumulate=not args.per_batch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_to_csv(report), encoding="utf-8")
    print(ascii_bars(report))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
