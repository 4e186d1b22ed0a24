"""Command-line entry point.

Subcommands: train, ablate, eval, plot, export-data.  Output goes under
$SILC_RUN_DIR (default ./runs).  Exit codes: 0 success, 1 usage error,
2 runtime/data error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    default_config,
    load_config,
    resolve_text,
)
from .data import SPLITS, SyntheticDataset, export_split
from .evals import REPORT_COLUMNS, EvalError, eval_params, run_suite
from .trainer import CheckpointError, load_checkpoint, run_training

USAGE_ERROR = 1
RUNTIME_ERROR = 2

ABLATION_ROWS = (
    # Table-style ladder: contrastive baseline, extra global views in the
    # pair loss, EMA tracking (evaluated), full self-distillation.
    ("clip_baseline", {"trainer.contrastive_global_views": "false", "trainer.ema_enabled": "false", "trainer.w_dist": "0"}),
    ("additional_views", {"trainer.contrastive_global_views": "true", "trainer.ema_enabled": "false", "trainer.w_dist": "0"}),
    ("ema", {"trainer.contrastive_global_views": "true", "trainer.ema_enabled": "true", "trainer.w_dist": "0"}),
    ("self_distillation", {"trainer.contrastive_global_views": "true", "trainer.ema_enabled": "true", "trainer.w_dist": "1.0"}),
)

ABLATION_METRICS = ("zero_shot_acc", "retrieval_i2t_at_1", "retrieval_t2i_at_1", "seg_miou")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the CLI contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get("SILC_RUN_DIR", "runs"))


def _resolve_run_dir(name: str, explicit) -> Path:
    if explicit:
        return Path(explicit)
    base = run_root() / name
    out = base
    i = 1
    while out.exists():
        out = base.with_name(f"{base.name}_{i}")
        i += 1
    return out


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"trainer.seed={args.seed}"])
    return cfg


def _write_reports(path: Path, reports, append=True) -> None:
    new = not path.exists() or not append
    with open(path, "a" if append else "w") as fh:
        if new:
            fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in reports:
            fh.write(r.row() + "\n")


def _print_report_table(reports) -> None:
    width = max((len(r.metric) for r in reports), default=10)
    print(f"{'metric':<{width}}  {'value':>8}  dataset")
    for r in reports:
        print(f"{r.metric:<{width}}  {r.value:8.4f}  {r.dataset}")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _resolve_run_dir(f"train_{config_hash(cfg)}_s{cfg.trainer.seed}", args.out)
    state = run_training(cfg, run_dir, resume_from=args.resume, max_steps=args.max_steps)
    print(f"run complete: {run_dir} (step {state.step})")
    if not args.no_eval:
        ds = SyntheticDataset(cfg.data)
        reports = run_suite(
            "all",
            eval_params(state.params, state.teacher),
            cfg,
            ds,
            step=state.step,
            cfg_hash=config_hash(cfg),
        )
        _write_reports(run_dir / "eval.csv", reports)
        _print_report_table(reports)
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    ds = SyntheticDataset(cfg.data)
    reports = run_suite(
        args.suite,
        eval_params(state.params, state.teacher),
        cfg,
        ds,
        step=state.step,
        cfg_hash=config_hash(cfg),
    )
    _print_report_table(reports)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    _write_reports(out, reports)
    print(f"reports appended to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    out_dir = _resolve_run_dir(f"ablate_{config_hash(cfg)}", args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed_rows = []
    medians = {}
    for row_name, deltas in ABLATION_ROWS:
        row_values = {m: [] for m in ABLATION_METRICS}
        for seed in seeds:
            row_cfg = apply_overrides(cfg, [f"{k}={v}" for k, v in deltas.items()])
            row_cfg = apply_overrides(row_cfg, [f"trainer.seed={seed}"])
            run_dir = out_dir / f"{row_name}_s{seed}"
            state = run_training(row_cfg, run_dir)
            ds = SyntheticDataset(row_cfg.data)
            reports = run_suite(
                "all",
                eval_params(state.params, state.teacher),
                row_cfg,
                ds,
                step=state.step,
                cfg_hash=config_hash(row_cfg),
            )
            _write_reports(run_dir / "eval.csv", reports)
            values = {r.metric: r.value for r in reports}
            for m in ABLATION_METRICS:
                row_values[m].append(values[m])
            per_seed_rows.append(
                [row_name, str(seed)] + [f"{values[m]:.6f}" for m in ABLATION_METRICS]
            )
        medians[row_name] = {m: float(np.median(row_values[m])) for m in ABLATION_METRICS}

    with open(out_dir / "ablation_per_seed.csv", "w") as fh:
        fh.write("row,seed," + ",".join(ABLATION_METRICS) + "\n")
        for row in per_seed_rows:
            fh.write(",".join(row) + "\n")
    table_path = out_dir / "ablation.csv"
    with open(table_path, "w") as fh:
        fh.write("row," + ",".join(ABLATION_METRICS) + "\n")
        for row_name, _ in ABLATION_ROWS:
            fh.write(
                row_name + "," + ",".join(f"{medians[row_name][m]:.6f}" for m in ABLATION_METRICS) + "\n"
            )
    print(f"ablation table: {table_path}")
    header = f"{'row':<18}" + "".join(f"{m:>22}" for m in ABLATION_METRICS)
    print(header)
    for row_name, _ in ABLATION_ROWS:
        print(
            f"{row_name:<18}"
            + "".join(f"{medians[row_name][m]:>22.4f}" for m in ABLATION_METRICS)
        )
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_eval_curves, plot_training_curves

    out_dir = Path(args.out) if args.out else Path(args.metrics).parent / "plots"
    outputs = plot_training_curves(args.metrics, out_dir)
    if args.eval_csv:
        outputs += plot_eval_curves(args.eval_csv, out_dir)
    if not outputs:
        print("warning: no rows to plot", file=sys.stderr)
        return 0
    for p in outputs:
        print(p)
    return 0


def cmd_export_data(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out) if args.out else run_root() / "dataset"
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = SyntheticDataset(cfg.data)
    for split in args.splits.split(","):
        split = split.strip()
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}; valid: {', '.join(SPLITS)}")
        n = export_split(ds, split, out_dir / f"{split}.bin")
        print(f"wrote {n} samples to {out_dir / (split + '.bin')}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="silc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat section.key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, help="shorthand for trainer.seed")
        p.add_argument("--out", help="output directory (default derived from config hash)")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="stop early after this many steps")
    p.add_argument("--no-eval", action="store_true", help="skip the post-training eval suite")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="run the four-row objective ablation")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--suite", default="all", help="all|zero_shot|few_shot|retrieval|segmentation")
    p.add_argument("--out", help="CSV to append reports to")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="render SVG plots from metrics CSVs")
    p.add_argument("metrics")
    p.add_argument("--eval-csv", help="optional eval report CSV")
    p.add_argument("--out", help="output directory for SVGs")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("export-data", help="export synthetic splits as binary records")
    common(p)
    p.add_argument("--splits", default="train,val,test")
    p.set_defaults(fn=cmd_export_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except ConfigError as e:
        # bad keys/values are usage errors; unreadable files are data errors
        msg = str(e)
        print(f"config error: {msg}", file=sys.stderr)
        return USAGE_ERROR if "valid keys" in msg or "section.key" in msg else RUNTIME_ERROR
    except (CheckpointError, EvalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except Exception as e:  # plotting and friends
        from .plotting import PlotError

        if isinstance(e, PlotError):
            print(f"error: {e}", file=sys.stderr)
            return RUNTIME_ERROR
        raise


if __name__ == "__main__":
    sys.exit(main())
