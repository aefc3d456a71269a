"""Report figures: ROC curves, class score matrices, training loss.

Figures are written with the Agg backend and a fixed SVG hash salt and no
date stamp, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "svg.hashsalt": "radon-net",
    "svg.fonttype": "path",
    "path.simplify": False,
}

SCENARIO_COLORS = {
    "both_known": "#1f4e9c",
    "both_novel": "#c8553d",
    "mixed": "#2a9d8f",
    "all": "#444444",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".") or "svg"
    metadata = {"Date": None} if fmt in ("svg", "pdf") else None
    fig.savefig(path, format=fmt, metadata=metadata)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, object], path, title: str = "ROC") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        ax.plot([0, 1], [0, 1], ls=":", lw=0.8, color="0.6")
        for name, curve in curves.items():
            ax.plot(curve.fpr, curve.tpr, lw=1.4, color=SCENARIO_COLORS.get(name),
                    label=f"{name} (AUC {curve.auc:.3f})", drawstyle="default")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.0)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.set_aspect("equal")
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_score_matrix(matrix, path, title: str = "mean match score") -> Path:
    """Heatmap with domain-0 classes on rows and domain-1 classes on columns."""
    n = len(matrix.classes)
    size = max(3.5, 0.45 * n + 1.5)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(size + 0.8, size))
        im = ax.imshow(matrix.mean, vmin=0.0, vmax=1.0, cmap="Blues", interpolation="nearest")
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(matrix.classes, rotation=90)
        ax.set_yticklabels(matrix.classes)
        ax.set_xlabel("domain 1 class")
        ax.set_ylabel("domain 0 class")
        if n <= 12:
            for i in range(n):
                for j in range(n):
                    v = matrix.mean[i, j]
                    ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7,
                            color="white" if v > 0.6 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(epoch_loss: Sequence[float], path, initial: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        xs = list(range(1, len(epoch_loss) + 1))
        ax.plot(xs, epoch_loss, marker="o", ms=3, lw=1.2, color="#1f4e9c", label="epoch mean")
        if initial is not None:
            ax.axhline(initial, ls="--", lw=0.8, color="0.5", label="first batch")
        ax.set_xlabel("epoch")
        ax.set_ylabel("binary cross-entropy")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
