"""Matplotlib defaults and figure helpers for sweep reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden_mean = (math.sqrt(5) - 1.0) / 2.0
fig_width = 3.4
fig_size = [fig_width, fig_width * golden_mean]

MODE_STYLE = {
    "MCA": dict(color="#08589e", marker="o"),
    "Zorro": dict(color="#e6550d", marker="s"),
    "EAO": dict(color="#31a354", marker="^"),
}

params = {
    "axes.labelsize": 9,
    "font.size": 8,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "mathtext.fontset": "stix",
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": fig_size,
    "figure.dpi": 150,
    "savefig.dpi": 200,
    "savefig.bbox": "tight",
    "lines.markersize": 4,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def new_figure(width: float = fig_width, height: float | None = None):
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(width, height or width * golden_mean))
    return fig, ax


def save(fig, path) -> None:
    with plt.rc_context(params):
        fig.savefig(path)
    plt.close(fig)


def metric_vs_sparsity(series: dict, metric: str, ylabel: str, path, arrow: str = "") -> None:
    """``series``: mode -> list of (sparsity, value); one line per mode."""
    with plt.rc_context(params):
        fig, ax = new_figure()
        for mode, rows in series.items():
            rows = sorted((s, v) for s, v in rows if v is not None)
            if not rows:
                continue
            xs, ys = zip(*rows)
            ax.plot(xs, ys, label=mode, **MODE_STYLE.get(mode, {}))
        ax.set_xlabel("modal sparsity")
        ax.set_ylabel(f"{ylabel} {arrow}".strip())
        ax.legend()
        save(fig, path)


def loss_curves(curves: list, mode: str, path) -> None:
    """Train (solid) and test (dashed) epoch losses, one color per sparsity."""
    with plt.rc_context(params):
        fig, ax = new_figure()
        cmap = plt.get_cmap("viridis")
        curves = sorted(curves, key=lambda c: c["sparsity"])
        for i, c in enumerate(curves):
            color = cmap(i / max(1, len(curves) - 1))
            epochs = range(len(c["train"]))
            ax.plot(epochs, c["train"], color=color, label=f"{c['sparsity']:.1f}")
            ax.plot(epochs, c["test"], color=color, linestyle="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        ax.set_title(mode, fontsize=9)
        ax.legend(title="sparsity")
        save(fig, path)
