"""Figure rendering for run reports (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402


def plot_pr_curves(curves: dict, path, thresholds=(0.5, 0.75)) -> None:
    """One panel per IoU threshold, one step line per class."""
    fig, axes = plt.subplots(1, len(thresholds), figsize=(5 * len(thresholds), 4), squeeze=False)
    for ax, t in zip(axes[0], thresholds):
        for cls, name in enumerate(CLASS_NAMES):
            curve = curves.get((cls, t))
            if not curve:
                continue
            r = [0.0] + [c[0] for c in curve]
            p = [curve[0][1]] + [c[1] for c in curve]
            ax.step(r, p, where="post", label=name)
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"IoU {t:.2f}")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curve(history: list, path, keys=("total", "cls", "l1", "giou")) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in history]
    for k in keys:
        ax.plot(epochs, [row[k] for row in history], label=k)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
