"""SVG plots of training metrics and eval curves.

Byte-determinism: matplotlib's SVG ids are seeded via svg.hashsalt and the
date metadata is suppressed, so the same CSV always yields the same bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

matplotlib.rcParams["svg.hashsalt"] = "silc"

from .trainer import METRIC_COLUMNS


class PlotError(ValueError):
    pass


def _read_csv(path, required: tuple[str, ...]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"metrics file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        missing = [c for c in required if c not in header]
        if missing:
            raise PlotError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise PlotError(f"{path}: malformed row at line {lineno}: {row!r}")
            try:
                rows.append({k: float(v) for k, v in zip(header, row)})
            except ValueError:
                raise PlotError(f"{path}: non-numeric value at line {lineno}: {row!r}") from None
    return rows


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_training_curves(metrics_csv, out_dir) -> list[Path]:
    """Loss/lr/temperature curves from a trainer metrics CSV."""
    rows = _read_csv(metrics_csv, METRIC_COLUMNS)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        return []
    x = [r["examples_seen"] for r in rows]
    outputs = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in ("loss_total", "loss_contrastive", "loss_dist"):
        ax.plot(x, [r[key] for r in rows], label=key, linewidth=1.0)
    ax.set_xlabel("examples seen")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    path = out_dir / "loss_curves.svg"
    _save(fig, path)
    outputs.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(x, [r["lr"] for r in rows], linewidth=1.0)
    axes[0].set_xlabel("examples seen")
    axes[0].set_title("learning rate")
    axes[1].plot(x, [r["temperature"] for r in rows], linewidth=1.0)
    axes[1].set_xlabel("examples seen")
    axes[1].set_title("temperature")
    fig.tight_layout()
    path = out_dir / "schedule.svg"
    _save(fig, path)
    outputs.append(path)
    return outputs


def plot_eval_curves(eval_csv, out_dir) -> list[Path]:
    """Eval metric vs examples-seen curves from an eval report CSV."""
    path = Path(eval_csv)
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(row)
    if not rows:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_metric: dict[str, list] = {}
    for r in rows:
        by_metric.setdefault(r["metric"], []).append((float(r["step"]), float(r["value"])))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for metric, pts in sorted(by_metric.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=metric, linewidth=1.0)
    ax.set_xlabel("checkpoint step")
    ax.set_ylabel("metric value")
    ax.legend(fontsize=7)
    ax.set_title("evaluation metrics")
    out = out_dir / "eval_metrics.svg"
    _save(fig, out)
    return [out]
