"""Command-line entry point.

Six subcommands cover the full workflow: synthesize data, pretrain an
encoder, finetune a segmentation model, evaluate it, benchmark forward
latency, and merge everything into a latency/accuracy report.

All failures the tool itself detects are printed as a single
"error: ..." line on stderr with exit code 2; argparse handles unknown
flags the same way (usage text on stderr, exit 2).
"""

import argparse
import glob
import os
import sys

import numpy as np

from .bench import (BENCH_VARIANTS, bench_forward, bench_variants,
                    format_bench_table, join_eval_metrics, read_bench_csv,
                    variant_id, write_bench_csv, write_pareto_csv,
                    write_pareto_svg)
from .data import GeneratorConfig, generate_dataset, load_scenes
from .evaluation import EvalReport, OracleModel, evaluate_split
from .training import (FinetuneConfig, PretrainConfig, finetune,
                       load_run_config, load_seg_model, pretrain)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _parse_size(text: str):
    """'896x896' -> (896, 896)."""
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ValueError(f"--size expects HxW (e.g. 896x896), got {text!r}")
    if h < 1 or w < 1:
        raise ValueError(f"--size dimensions must be positive, got {text!r}")
    return h, w


def _cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise ValueError(f"--scenes must be >= 1, got {args.scenes}")
    kw = {}
    if args.size is not None:
        kw["height"], kw["width"] = _parse_size(args.size)
    if args.prevalence is not None:
        kw["positive_fraction"] = args.prevalence
    if args.invalid_frac is not None:
        kw["invalid_fraction"] = args.invalid_frac
    cfg = GeneratorConfig(**kw)
    generate_dataset(args.out, args.scenes, cfg, args.seed)
    print(f"wrote {args.scenes} scenes to {args.out} (seed {args.seed})")
    return 0


def _load_phase_config(path, want, phase: str):
    try:
        cfg = load_run_config(path)
    except ValueError as e:
        raise ValueError(f"{path}: {e}")
    if not isinstance(cfg, want):
        raise ValueError(f'{path}: config "phase" is not "{phase}"')
    return cfg


def _cmd_pretrain(args) -> int:
    cfg = _load_phase_config(args.config, PretrainConfig, "pretrain")
    result = pretrain(cfg, args.data, args.out)
    print(f"pretrain finished: {result.epochs_run} epochs, "
          f"best probe AP {result.best_metric:.4f} at epoch "
          f"{result.best_epoch} -> {result.best_path}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_phase_config(args.config, FinetuneConfig, "finetune")
    encoder = None if args.encoder.lower() == "none" else args.encoder
    result = finetune(cfg, args.data, args.out, encoder_ckpt=encoder)
    print(f"finetune finished: {result.epochs_run} epochs, "
          f"best val AP {result.best_metric:.4f} at epoch "
          f"{result.best_epoch} -> {result.best_path}")
    return 0


def _cmd_eval(args) -> int:
    threshold = None
    source = None
    if args.split == "test":
        if args.threshold_from is None:
            raise ValueError(
                "the test split needs --threshold-from REPORT; the alarm "
                "threshold must be carried over from a val report")
    elif args.threshold_from is not None:
        raise ValueError(
            "--threshold-from only applies to the test split; val selects "
            "its own threshold from the PR sweep")
    if args.threshold_from is not None:
        donor = EvalReport.load(args.threshold_from)
        if donor.threshold is None:
            raise ValueError(f"{args.threshold_from} records no threshold")
        threshold = donor.threshold
        source = f"report {args.threshold_from} (split {donor.split!r})"

    if args.model == "oracle":
        model = OracleModel()
    else:
        model, _ = load_seg_model(args.model)
        model.eval()
    scenes = load_scenes(args.data, args.split)
    if not scenes:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    report, _ = evaluate_split(model, scenes, args.split,
                               tile=args.tile, overlap=args.overlap,
                               threshold=threshold, threshold_source=source)
    out = args.out or f"eval_{args.split}.json"
    report.save(out)
    print(f"split {args.split}: {report.n_scenes} scenes, "
          f"pixel AP {report.pixel_ap:.4f}, "
          f"fire F1 {report.fire['f1']:.4f} "
          f"at threshold {report.threshold:.4f} -> {out}")
    return 0


def _cmd_bench(args) -> int:
    if args.model in BENCH_VARIANTS:
        results = bench_variants([args.model], batch=args.batch,
                                 input_size=args.input, warmup=args.warmup,
                                 iters=args.iters)
    elif os.path.exists(args.model):
        model, _ = load_seg_model(args.model)
        model.to_dtype(np.float32)
        results = [bench_forward(model, variant_id(model.config.to_dict()),
                                 batch=args.batch, input_size=args.input,
                                 warmup=args.warmup, iters=args.iters)]
    else:
        known = ", ".join(sorted(BENCH_VARIANTS))
        raise ValueError(
            f"--model must be a checkpoint path or one of: {known}")
    write_bench_csv(results, args.out)
    print(format_bench_table(results))
    print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    results = []
    for path in sorted(glob.glob(os.path.join(args.in_dir, "*.csv"))):
        try:
            results.extend(read_bench_csv(path))
        except ValueError:
            continue
    if not results:
        raise ValueError(f"no bench CSVs found in {args.in_dir}")
    reports = []
    for path in sorted(glob.glob(os.path.join(args.in_dir, "*.json"))):
        try:
            reports.append(EvalReport.load(path))
        except (ValueError, KeyError, TypeError):
            continue
    join_eval_metrics(results, reports)
    flags = write_pareto_csv(results, args.out)
    base, _ = os.path.splitext(args.out)
    with open(base + ".txt", "w") as f:
        f.write(format_bench_table(results) + "\n")
    write_pareto_svg(results, base + ".svg")
    n_front = sum(1 for d in flags if not d)
    print(f"{len(results)} models, {n_front} on the frontier -> "
          f"{args.out}, {base}.txt, {base}.svg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densemae",
        description="dense self-supervised pretraining for thermal "
                    "hotspot segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a scene dataset")
    p.add_argument("--scenes", type=int, required=True,
                   help="number of scenes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--size", default=None, metavar="HxW",
                   help="scene size, e.g. 896x896")
    p.add_argument("--prevalence", type=float, default=None,
                   help="expected hot-pixel fraction per scene")
    p.add_argument("--invalid-frac", type=float, default=None,
                   help="expected invalid-pixel fraction per scene")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised encoder training")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised segmentation training")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--encoder", required=True,
                   help="pretrain checkpoint, or 'none' for random init")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="scene-level evaluation")
    p.add_argument("--model", required=True,
                   help="segmentation checkpoint, or 'oracle' to route "
                        "ground truth through the pipeline")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", required=True, choices=("val", "test"))
    p.add_argument("--threshold-from", default=None, metavar="REPORT",
                   help="val report whose threshold to reuse (test only)")
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--out", default=None,
                   help="report path (default eval_SPLIT.json)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="forward-latency benchmark")
    p.add_argument("--model", required=True,
                   help="checkpoint path or reference variant name")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="merge bench CSVs and eval reports")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR",
                   help="directory holding bench *.csv and eval *.json")
    p.add_argument("--out", default="pareto.csv")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
