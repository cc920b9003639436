"""Report figures. Uses the object-oriented Agg API, never pyplot state."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PALETTE = ("#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860", "#DA8BC3")

RC = {"font.size": 9, "axes.titlesize": 10, "axes.labelsize": 9}


def _figure(width: float = 6.4, height: float | None = None, **kw) -> Figure:
    if height is None:
        height = width * (np.sqrt(5.0) - 1.0) / 2.0
    fig = Figure(figsize=(width, height), facecolor="w", **kw)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    return path


def _style(ax) -> None:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=RC["font.size"])


def plot_benchmark(report, path) -> Path:
    """One bar panel per metric, one bar per method."""
    from .benchmark import HEADERS, METRICS

    fig = _figure(8.0, 5.5)
    axes = fig.subplots(2, 2)
    methods = [r.method for r in report.rows]
    x = np.arange(len(methods))
    for ax, metric in zip(axes.ravel(), METRICS):
        vals = [getattr(r, metric) for r in report.rows]
        ax.bar(x, vals, color=[PALETTE[i % len(PALETTE)] for i in range(len(methods))])
        ax.set_title(HEADERS[metric], fontsize=RC["axes.titlesize"])
        ax.set_xticks(x)
        ax.set_xticklabels(methods, rotation=30, ha="right")
        _style(ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    fig = _figure(5.5)
    ax = fig.add_subplot(111)
    labels = ["+".join(c[0].upper() for c in r.components) for r in rows]
    ax.bar(np.arange(len(rows)), [r.mean_style_loss for r in rows], color=PALETTE[0])
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("score components (C=content, S=style, A=aesthetic)")
    ax.set_ylabel("mean style loss of winners")
    _style(ax)
    return _save(fig, path)


def plot_training_curve(metrics: dict[str, list[tuple[int, float]]], path,
                        ylabel: str = "loss") -> Path:
    fig = _figure(5.5)
    ax = fig.add_subplot(111)
    offset = 0
    for i, (name, pts) in enumerate(metrics.items()):
        if not pts:
            continue
        ep = np.array([e for e, _ in pts]) + offset
        ax.plot(ep, [v for _, v in pts], "-", lw=1.5, color=PALETTE[i % len(PALETTE)], label=name)
        offset = ep[-1] + 1
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if len(metrics) > 1:
        ax.legend(frameon=False)
    _style(ax)
    return _save(fig, path)


def plot_retrieval(results: dict[str, tuple[float, ...]], path, ks=(1, 5, 10)) -> Path:
    fig = _figure(5.5)
    ax = fig.add_subplot(111)
    width = 0.8 / max(len(results), 1)
    x = np.arange(len(ks))
    for i, (name, vals) in enumerate(results.items()):
        ax.bar(x + i * width, vals, width, label=name, color=PALETTE[i % len(PALETTE)])
    ax.set_xticks(x + width * (len(results) - 1) / 2)
    ax.set_xticklabels([f"Rank{k}" for k in ks])
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    _style(ax)
    return _save(fig, path)
