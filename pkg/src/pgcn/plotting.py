"""Report figures written straight to image files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(losses: Sequence[float], path: str | Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(losses):
        ax.plot(np.arange(len(losses)), losses, lw=1)
        if min(losses) > 0:
            ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def roc_figure(curves: dict[str, tuple[np.ndarray, np.ndarray, float]], path: str | Path) -> Path:
    """``curves`` maps a label to ``(fpr, tpr, auroc)``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label, (fpr, tpr, auc) in curves.items():
        ax.plot(fpr, tpr, lw=1.5, label=f"{label} (AUROC {auc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def grid_search_figure(table: Sequence[tuple[int, float, float]], path: str | Path) -> Path:
    """Grouped bars of image and pixel AUROC per grid size."""
    ns = [str(row[0]) for row in table]
    x = np.arange(len(table))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(table) + 2), 3.5))
    ax.bar(x - 0.2, [row[1] for row in table], 0.4, label="image")
    ax.bar(x + 0.2, [row[2] for row in table], 0.4, label="pixel")
    ax.set_xticks(x, [f"{n}×{n}" for n in ns])
    ax.set_ylim(0, 1)
    ax.set_ylabel("AUROC")
    ax.legend(fontsize=8)
    return _save(fig, path)


def heatmap_overlay(image: np.ndarray, anomaly: np.ndarray, path: str | Path, mask: np.ndarray | None = None) -> Path:
    """Image, anomaly map, and optionally the ground-truth mask, side by side."""
    panels = 3 if mask is not None else 2
    fig, axes = plt.subplots(1, panels, figsize=(3 * panels, 3))
    axes[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    axes[0].set_title("input")
    axes[1].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    axes[1].imshow(anomaly, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    axes[1].set_title("anomaly")
    if mask is not None:
        axes[2].imshow(mask, cmap="gray")
        axes[2].set_title("ground truth")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
