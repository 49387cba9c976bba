"""Figure emission for metrics reports (file output only, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

PANELS = (("old", "old classes"), ("new", "new classes"), ("all", "all classes"))
FORMATS = ("png", "svg")


def _save(fig, out_stem: Path) -> list[Path]:
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in FORMATS:
        p = out_stem.with_suffix(f".{ext}")
        fig.savefig(p, dpi=120, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def recall_series(reports: Mapping[str, MetricsReport], budget: int) -> dict:
    """``{panel: {label: (iou_thresholds, recall)}}`` for the curves present at ``budget``."""
    out: dict = {p: {} for p, _ in PANELS}
    for label, rep in reports.items():
        curves = rep.recall_curves.get(str(budget), {})
        for panel, _ in PANELS:
            c = curves.get(panel)
            if c:
                out[panel][label] = (list(c["iou_thresholds"]), list(c["recall"]))
    return out


def plot_recall(reports: Mapping[str, MetricsReport], budget: int, out_stem) -> tuple[list[Path], dict]:
    """Three side-by-side recall-vs-IoU panels (old / new / all), one line per report."""
    series = recall_series(reports, budget)
    if not any(series.values()):
        raise ValueError(f"no recall curves at budget {budget} in the given reports")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), sharey=True)
    for ax, (panel, title) in zip(axes, PANELS):
        for label, (x, y) in series[panel].items():
            ax.plot(x, y, marker="o", ms=3, label=label)
        ax.set_title(f"{title} ({budget} proposals)")
        ax.set_xlabel("IoU")
        ax.set_xlim(0.5, 0.95)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("recall")
    handles, labels = axes[2].get_legend_handles_labels() if series["all"] else axes[0].get_legend_handles_labels()
    if handles:
        axes[2].legend(handles, labels, fontsize=8, loc="lower left")
    return _save(fig, Path(out_stem)), series


def map_series(runs: Mapping[str, Sequence[MetricsReport]]) -> dict[str, tuple[list[int], list[float]]]:
    """``{label: (classes_seen, map_all)}`` for stage-ordered reports."""
    out = {}
    for label, stages in runs.items():
        xs, ys = [], []
        for rep in stages:
            if rep.map_all is None:
                continue
            xs.append(len(rep.class_names))
            ys.append(float(rep.map_all))
        out[label] = (xs, ys)
    return out


def plot_map_vs_classes(runs: Mapping[str, Sequence[MetricsReport]], out_stem) -> tuple[list[Path], dict]:
    series = map_series(runs)
    if not any(xs for xs, _ in series.values()):
        raise ValueError("no mAP values to plot")
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel("number of classes seen")
    ax.set_ylabel("mAP (all seen classes)")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, Path(out_stem)), series
