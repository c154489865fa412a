#!/usr/bin/env python3
"""Toy layer-selection ablation: pretrain a start model on the general
task, then compare full fine-tuning, single-stage, and two-stage
layer-selective tuning on the same translation corpus.

Writes compare.csv / compare.json under --out and prints the table.
"""
import argparse
import json
from pathlib import Path

from forge.synth import (
    SynthLangSpec,
    evaluate,
    gen_general_corpus,
    gen_translation_corpus,
    make_batches,
)
from forge.tinylm import ModelConfig, init
from forge.trainer import TrainConfig, TrainMode, run, select_layers


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/compare")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n", type=int, default=3000)
    parser.add_argument("--layers", type=int, default=8)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--m", type=int, default=3)
    parser.add_argument("--tune-lr", type=float, default=1e-3)
    args = parser.parse_args()

    model_config = ModelConfig(
        n_layers=args.layers, d_model=64, n_heads=4, d_ff=256,
        vocab_size=64, max_seq_len=32, init_seed=1234 + args.seed)

    general_train, general_eval = gen_general_corpus(args.n, seed=args.seed + 11)
    spec = SynthLangSpec(vocab_size=64, perm_seed=5, min_len=4, max_len=8)
    translation_train, translation_eval = gen_translation_corpus(
        spec, args.n, seed=args.seed + 12)

    print("pretraining start model on the general task ...")
    pretrain = TrainConfig(lr_max=1e-2, lr_min=1e-3, epochs=8, batch_size=8,
                           grad_accum=1, seed=args.seed + 21)
    start = run(init(model_config), make_batches(general_train, 8),
                TrainMode.full_finetune(), pretrain).params

    selection = select_layers(model_config.n_layers, args.k, args.m)
    tune = TrainConfig(lr_max=args.tune_lr, lr_min=args.tune_lr / 10, epochs=1,
                       batch_size=8, grad_accum=1, seed=args.seed + 33)
    batches = make_batches(translation_train, 8)
    rows = [("start", None),
            ("fft", TrainMode.full_finetune()),
            ("single-stage", TrainMode.single_stage(selection)),
            ("two-stage", TrainMode.two_stage(selection))]

    start_general = evaluate(start, general_eval).mean_ce
    table = []
    for label, mode in rows:
        params = start if mode is None else run(start, batches, mode, tune).params
        tr = evaluate(params, translation_eval)
        gn = evaluate(params, general_eval)
        table.append({
            "label": label,
            "translation_ce": tr.mean_ce, "translation_em": tr.exact_match,
            "general_ce": gn.mean_ce, "general_em": gn.exact_match,
            "delta_general_ce": gn.mean_ce - start_general,
        })
        print(f"{label:>14}: tr CE {tr.mean_ce:7.4f} EM {tr.exact_match:.3f} | "
              f"gen CE {gn.mean_ce:7.4f} (delta {gn.mean_ce - start_general:+.4f})")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = list(table[0].keys())
    lines = [",".join(columns)]
    for row in table:
        lines.append(",".join(str(row[c]) for c in columns))
    (out / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "compare.json").write_text(json.dumps(table, indent=2), encoding="utf-8")
    print(f"wrote {out}/compare.csv")


if __name__ == "__main__":
    main()
