"""Single `forge` entry point: refine, make-synth, train, sweep,
analyze-gradients, eval, and the compare orchestration.

All randomness flows through explicit --seed flags; wall-clock timings
live in sidecar files so primary outputs stay byte-diffable across
reruns. Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path


from . import refinery, sensitivity, synth, tinylm, trainer
from .errors import ForgeError
from .records import ParallelRecord, read_records, write_records
from .scorers import Scorer, open_scorer


def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        return f.readlines()


def _load_records(path: str) -> list[ParallelRecord]:
    return list(read_records(_read_lines(path)))


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _global_defaults(args) -> dict:
    if getattr(args, "config", None):
        return _load_json(args.config)
    return {}


# ---------------------------------------------------------------------------
# refine

def _open_optional_scorer(spec: str | None) -> Scorer | None:
    return open_scorer(spec) if spec else None


def cmd_refine(args) -> int:
    defaults = _global_defaults(args)
    if args.pipeline_config:
        config = refinery.RefineryConfig.from_json(
            Path(args.pipeline_config).read_text(encoding="utf-8"))
    else:
        config = refinery.RefineryConfig(**defaults.get("refinery", {}))
    if args.strict:
        config.strict = True

    templates = refinery.DEFAULT_TEMPLATES
    if args.templates:
        lines = [l.rstrip("\n") for l in _read_lines(args.templates)]
        templates = tuple(l for l in lines if l)

    langid_scorer = _open_optional_scorer(args.langid_scorer)
    quality_scorer = _open_optional_scorer(args.quality_scorer)
    dev_scorer = _open_optional_scorer(args.dev_scorer)
    dev_records = _load_records(args.dev_set) if args.dev_set else None
    try:
        result = refinery.run_pipeline(
            _read_lines(args.input), config,
            langid_scorer=langid_scorer,
            quality_scorer=quality_scorer,
            dev_records=dev_records,
            dev_scorer=dev_scorer,
            templates=templates,
        )
    finally:
        for scorer in (langid_scorer, quality_scorer, dev_scorer):
            if scorer is not None:
                scorer.close()

    with open(args.output, "w", encoding="utf-8") as f:
        if args.emit == "records":
            write_records(result.records, f)
        else:
            for sample in result.samples:
                f.write(sample.to_json() + "\n")
    report_json = result.report.to_json()
    if args.report:
        Path(args.report).write_text(report_json + "\n", encoding="utf-8")
    else:
        print(report_json)
    return 0


# ---------------------------------------------------------------------------
# make-synth

def cmd_make_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    if args.task == "translation":
        spec = synth.SynthLangSpec(
            vocab_size=args.vocab_size, perm_seed=args.perm_seed,
            reorder=args.reorder, min_len=args.min_len, max_len=args.max_len)
        train, eval_set = synth.gen_translation_corpus(spec, args.n, seed)
        with open(out / "records.jsonl", "w", encoding="utf-8") as f:
            write_records((synth.sample_to_record(s, spec) for s in train), f)
        meta = {"task": "translation", "n": args.n, "seed": seed,
                "vocab_size": args.vocab_size, "perm_seed": args.perm_seed,
                "reorder": args.reorder}
    else:
        train, eval_set = synth.gen_general_corpus(
            args.n, seed, vocab_size=args.vocab_size,
            max_len=args.gen_max_len, max_step=args.max_step)
        meta = {"task": "general", "n": args.n, "seed": seed,
                "vocab_size": args.vocab_size, "max_len": args.gen_max_len,
                "max_step": args.max_step}
    synth.write_samples(train, out / "train.jsonl")
    synth.write_samples(eval_set.samples, out / "eval.jsonl")
    (out / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# data loading shared by train / sweep / eval / analyze

def _sniff_samples(path: Path, vocab_size: int) -> list[synth.Sample]:
    with open(path, "r", encoding="utf-8") as f:
        first = ""
        for line in f:
            if line.strip():
                first = line
                break
    if not first:
        return []
    obj = json.loads(first)
    if "prompt" in obj:
        return synth.read_samples(path)
    if "src" in obj:
        records = list(read_records(_read_lines(str(path))))
        return [synth.record_to_sample(r, vocab_size) for r in records]
    raise ForgeError(
        f"{path}: expected token samples or parallel records "
        "(instruction-text output is not trainable; refine with --emit records)")


def load_samples(path: str, vocab_size: int, split: str = "train") -> list[synth.Sample]:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise ForgeError(f"no such data file: {p}")
    return _sniff_samples(p, vocab_size)


def _load_model(args) -> tinylm.ModelParams:
    if getattr(args, "checkpoint", None):
        return tinylm.load_checkpoint(args.checkpoint)
    defaults = _global_defaults(args)
    if getattr(args, "model_config", None):
        cfg = tinylm.ModelConfig(**_load_json(args.model_config))
    elif "model" in defaults:
        cfg = tinylm.ModelConfig(**defaults["model"])
    else:
        raise ForgeError("need --model-config or --checkpoint")
    return tinylm.init(cfg)


def _train_config(args) -> trainer.TrainConfig:
    defaults = _global_defaults(args).get("train", {})
    config = trainer.TrainConfig(**defaults)
    for name, attr in (("lr_max", "lr_max"), ("lr_min", "lr_min"),
                       ("warmup_ratio", "warmup_ratio"), ("epochs", "epochs"),
                       ("batch_size", "batch_size"), ("grad_accum", "grad_accum")):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, attr, value)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _parse_mode(args, n_layers: int) -> trainer.TrainMode:
    mode = args.mode
    if mode.startswith("single-layer:"):
        return trainer.TrainMode.single_layer(int(mode.split(":", 1)[1]))
    if mode == "fft":
        return trainer.TrainMode.full_finetune()
    selection = trainer.select_layers(n_layers, args.k, args.m, args.skip or ())
    if mode == "two-stage":
        return trainer.TrainMode.two_stage(selection)
    if mode == "single-stage":
        return trainer.TrainMode.single_stage(selection)
    raise ForgeError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    params = _load_model(args)
    config = _train_config(args)
    mode = _parse_mode(args, params.config.n_layers)
    samples = load_samples(args.data, params.config.vocab_size)
    batches = synth.make_batches(samples, config.batch_size)

    result = trainer.run(params, batches, mode, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_log.jsonl", "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(json.dumps(entry) + "\n")
    (out / "timing.json").write_text(
        json.dumps({"wall_clock_s": result.wall_clock,
                    "finished_at": time.time()}), encoding="utf-8")
    for stage, stage_params in result.stage_params.items():
        tinylm.save_checkpoint(stage_params, out / "checkpoints" / stage)
    tinylm.save_checkpoint(result.params, out / "checkpoints" / "final")
    return 0


# ---------------------------------------------------------------------------
# sweep

def cmd_sweep(args) -> int:
    params = _load_model(args)
    config = _train_config(args)
    samples = load_samples(args.data, params.config.vocab_size)
    batches = synth.make_batches(samples, config.batch_size)

    eval_sets = {}
    if args.eval_translation:
        eval_sets["translation"] = synth.EvalSet(
            "translation", load_samples(args.eval_translation,
                                        params.config.vocab_size, split="eval"))
    if args.eval_general:
        eval_sets["general"] = synth.EvalSet(
            "general", load_samples(args.eval_general,
                                    params.config.vocab_size, split="eval"))
    if not eval_sets:
        raise ForgeError("sweep needs --eval-translation and/or --eval-general")

    workers = 1 if args.deterministic else max(1, args.threads)
    rows = trainer.single_layer_sweep(params, batches, eval_sets, config,
                                      workers=workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(eval_sets)
    header = "layer," + ",".join(f"{n}_ce,{n}_em" for n in names)
    lines = [header]
    for row in rows:
        cells = [str(row.layer)]
        for name in names:
            res = row.results[name]
            cells.extend([repr(res.mean_ce), repr(res.exact_match)])
        lines.append(",".join(cells))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# analyze-gradients

def cmd_analyze(args) -> int:
    params = tinylm.load_checkpoint(args.checkpoint)
    samples = load_samples(args.data, params.config.vocab_size)
    batches = synth.make_batches(samples, args.batch_size)[:args.batches]
    if not batches:
        raise ForgeError("probe dataset produced no batches")
    report = sensitivity.layer_gradient_report(
        params, batches, dataset_id=args.data, seed=args.seed or 0,
        accumulate=not args.per_batch)
    csv_text = sensitivity.report_to_csv(report)
    Path(args.out).write_text(csv_text, encoding="utf-8")
    print(sensitivity.ascii_bars(report))
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    params = tinylm.load_checkpoint(args.checkpoint)
    samples = load_samples(args.data, params.config.vocab_size, split="eval")
    eval_set = synth.EvalSet(task_id=args.task_id, samples=samples)
    result = synth.evaluate(params, eval_set)
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# compare

def cmd_compare(args) -> int:
    spec = _load_json(args.spec)
    out = Path(args.out or spec["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    labels = [row["label"] for row in spec["rows"]]
    if len(set(labels)) != len(labels):
        raise ForgeError("row labels must be unique")

    model_config = tinylm.ModelConfig(**_load_json(spec["model_config"]))
    if spec.get("start_checkpoint"):
        start = tinylm.load_checkpoint(spec["start_checkpoint"])
    else:
        start = tinylm.init(model_config)
    if spec.get("pretrain"):
        pre = spec["pretrain"]
        pre_cfg = trainer.TrainConfig(**pre.get("config", {}))
        pre_samples = load_samples(pre["data"], model_config.vocab_size)
        pre_batches = synth.make_batches(pre_samples, pre_cfg.batch_size)
        start = trainer.run(start, pre_batches, trainer.TrainMode.full_finetune(),
                            pre_cfg).params

    eval_sets = {
        name: synth.EvalSet(name, load_samples(path, model_config.vocab_size,
                                               split="eval"))
        for name, path in spec["eval_sets"].items()
    }
    start_evals = {name: synth.evaluate(start, es) for name, es in eval_sets.items()}

    train_samples = load_samples(spec["train_data"], model_config.vocab_size)

    table = []
    for row in spec["rows"]:
        cfg = trainer.TrainConfig(**row.get("train", {}))
        if "seed" not in row.get("train", {}):
            cfg.seed = spec.get("seed", 0)
        kind = row["mode"]
        if kind in ("two-stage", "single-stage"):
            selection = trainer.select_layers(
                model_config.n_layers, row.get("k", 0), row.get("m", 0),
                row.get("skip", ()))
            mode = (trainer.TrainMode.two_stage(selection) if kind == "two-stage"
                    else trainer.TrainMode.single_stage(selection))
        elif kind == "fft":
            mode = trainer.TrainMode.full_finetune()
        elif kind == "single-layer":
            mode = trainer.TrainMode.single_layer(row["layer"])
        else:
            raise ForgeError(f"row {row['label']!r}: unknown mode {kind!r}")
        try:
            batches = synth.make_batches(train_samples, cfg.batch_size)
            result = trainer.run(start, batches, mode, cfg)
        except ForgeError as e:
            raise ForgeError(f"row {row['label']!r}: {e}") from e
        entry = {"label": row["label"], "mode": kind}
        for name, es in eval_sets.items():
            res = synth.evaluate(result.params, es)
            entry[f"{name}_ce"] = res.mean_ce
            entry[f"{name}_em"] = res.exact_match
        if "general" in eval_sets:
            entry["delta_general_ce"] = entry["general_ce"] - start_evals["general"].mean_ce
        table.append(entry)

    start_row = {"label": "start", "mode": "none"}
    for name, res in start_evals.items():
        start_row[f"{name}_ce"] = res.mean_ce
        start_row[f"{name}_em"] = res.exact_match
    if "general" in eval_sets:
        start_row["delta_general_ce"] = 0.0

    full_table = [start_row] + table
    columns = ["label", "mode"]
    for name in sorted(eval_sets):
        columns.extend([f"{name}_ce", f"{name}_em"])
    if "general" in eval_sets:
        columns.append("delta_general_ce")
    csv_lines = [",".join(columns)]
    for entry in full_table:
        csv_lines.append(",".join(
            repr(entry[c]) if isinstance(entry[c], float) else str(entry[c])
            for c in columns))
    (out / "compare.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    (out / "compare.json").write_text(json.dumps(full_table, indent=2),
                                      encoding="utf-8")
    print("\n".join(csv_lines))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="global random seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel sections")
    common.add_argument("--deterministic", action="store_true",
                        help="force sequential execution everywhere")

    parser = argparse.ArgumentParser(prog="forge", parents=[common])
    parser.add_argument("--config", default=None,
                        help="JSON file with refinery/train/model defaults "
                             "(goes before the subcommand)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", parents=[common],
                       help="run the six-step corpus refinement pipeline")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", dest="pipeline_config", default=None,
                   help="refinery config JSON file")
    p.add_argument("--langid-scorer", default=None, metavar="CMD|FILE")
    p.add_argument("--quality-scorer", default=None, metavar="CMD|FILE")
    p.add_argument("--dev-set", default=None)
    p.add_argument("--dev-scorer", default=None, metavar="CMD|FILE",
                   help="scorer for the dev set (defaults to --quality-scorer)")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--report", default=None)
    p.add_argument("--emit", choices=("instructions", "records"),
                   default="instructions")
    p.add_argument("--templates", default=None,
                   help="file with one instruction template per line")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("make-synth", parents=[common],
                       help="generate a synthetic task corpus")
    p.add_argument("--task", choices=("translation", "general"), required=True)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--perm-seed", type=int, default=0)
    p.add_argument("--reorder", choices=("identity", "reverse"), default="identity")
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--gen-max-len", type=int, default=8,
                   help="general task: longest response")
    p.add_argument("--max-step", type=int, default=8,
                   help="general task: steps drawn from [0, max-step)")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--mode", required=True,
                   help="two-stage | single-stage | fft | single-layer:<l>")
    p.add_argument("--k", type=int, default=0, help="bottom-k layers (stage 1)")
    p.add_argument("--m", type=int, default=0, help="top-m layers (stage 2)")
    p.add_argument("--skip", type=int, action="append",
                   help="layer index excluded from tuning (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default=None)
    p.add_argument("--checkpoint", default=None,
                   help="start from this checkpoint instead of a fresh init")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr-max", type=float, default=None, dest="lr_max")
    p.add_argument("--lr-min", type=float, default=None, dest="lr_min")
    p.add_argument("--warmup-ratio", type=float, default=None, dest="warmup_ratio")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--grad-accum", type=int, default=None, dest="grad_accum")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common],
                       help="train each layer independently and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-translation", default=None)
    p.add_argument("--eval-general", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr-max", type=float, default=None, dest="lr_max")
    p.add_argument("--lr-min", type=float, default=None, dest="lr_min")
    p.add_argument("--warmup-ratio", type=float, default=None, dest="warmup_ratio")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--grad-accum", type=int, default=None, dest="grad_accum")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-gradients", parents=[common],
                       help="per-layer nuclear norms of Q/K/V gradients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    p.add_argument("--out", required=True)
    p.add_argument("--per-batch", action="store_true",
                   help="mean of per-batch norms instead of accumulated gradient")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-id", default="eval")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common],
                       help="train several modes from one start checkpoint")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ForgeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
