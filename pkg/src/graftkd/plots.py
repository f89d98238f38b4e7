"""Training-curve and accuracy-vs-K figures from run directories.

Figures are rendered with the Agg backend and saved without timestamps or
version metadata, so identical metrics give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .pipeline import MANIFEST_NAME, METRICS_NAME, MetricsLog  # noqa: E402

__all__ = ["EmptyMetricsError", "emit_plots", "summarize_runs"]

_META = {"Software": None}


class EmptyMetricsError(ValueError):
    pass


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _unit_curves(run_dir: Path) -> list[Path]:
    records = MetricsLog(run_dir / METRICS_NAME).read()
    if not records:
        raise EmptyMetricsError(f"no metrics rows in {run_dir / METRICS_NAME}")
    units: dict[str, list] = defaultdict(list)
    for r in records:
        units[r.unit].append(r)
    out = []
    for unit, recs in units.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r.epoch for r in recs], [r.train_acc for r in recs], label="agreement with teacher (train)")
        evals = [r for r in recs if r.test_acc is not None]
        if evals:
            ax.plot([r.epoch for r in evals], [r.test_acc for r in evals], marker="o", label="test top-1")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(unit)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        out.append(_save(fig, run_dir / f"curve_{unit}.png"))
    return out


def _runs_under(path: Path) -> list[Path]:
    if (path / MANIFEST_NAME).exists():
        return [path]
    return sorted(p.parent for p in path.glob(f"*/{MANIFEST_NAME}"))


def summarize_runs(runs: list[Path], metric: str = "student_top1") -> dict[int, list[float]]:
    """Final ``metric`` of every finished run, grouped by K."""
    by_k: dict[int, list[float]] = defaultdict(list)
    for run in runs:
        with open(run / MANIFEST_NAME) as fh:
            m = json.load(fh)
        if metric in m.get("metrics", {}):
            by_k[int(m["config"]["experiment"]["k"])].append(float(m["metrics"][metric]))
    return dict(sorted(by_k.items()))


def _mean_std(values: list[float]) -> tuple[float, float]:
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def emit_plots(path: str | Path) -> list[Path]:
    """Write per-unit curves for every run under ``path`` and one accuracy-vs-K summary.

    ``path`` is a run directory or a directory of runs (a sweep). Error bars
    are sample standard deviations across runs with the same K and are drawn
    only when there is more than one run per K.
    """
    path = Path(path)
    runs = _runs_under(path)
    if not runs:
        raise EmptyMetricsError(f"no run directories under {path}")
    out = []
    for run in runs:
        out += _unit_curves(run)

    series = {"grafted student": summarize_runs(runs, "student_top1"), "whole-student baseline": summarize_runs(runs, "baseline_top1")}
    series = {k: v for k, v in series.items() if v}
    if not series:
        return out
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for name, by_k in series.items():
        ks = list(by_k)
        stats = [_mean_std(by_k[k]) for k in ks]
        multi = any(len(v) > 1 for v in by_k.values())
        ax.errorbar(
            ks, [m for m, _ in stats], yerr=[s for _, s in stats] if multi else None,
            marker="o", capsize=4 if multi else 0, label=name,
        )
        rows += [(name, k, len(by_k[k]), m, s) for k, (m, s) in zip(ks, stats)]
    ax.set_xlabel("K (shots per class)")
    ax.set_ylabel("test top-1")
    ax.set_xticks(sorted({k for v in series.values() for k in v}))
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    out.append(_save(fig, path / "accuracy_vs_k.png"))
    with open(path / "accuracy_vs_k.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "k", "runs", "mean", "std"])
        w.writerows((n, k, c, repr(m), repr(s)) for n, k, c, m, s in rows)
    out.append(path / "accuracy_vs_k.csv")
    return out
