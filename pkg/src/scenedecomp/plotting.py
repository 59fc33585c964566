"""Figures written next to the CLI's delimited outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(records: Sequence[dict], path, terms: Sequence[str] | None = None) -> Path:
    """Per-term loss curves (log scale) from JSON-lines loss records."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if records:
        steps = [r["step"] for r in records]
        keys = terms or [k for k in records[0] if k not in ("step",)]
        for k in keys:
            vals = np.array([r.get(k, np.nan) for r in records], float)
            if np.any(vals > 0):
                ax.plot(steps, np.where(vals > 0, vals, np.nan), label=k, lw=1.2 if k == "total" else 0.8)
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)


def rotation_histogram(errors_deg: Sequence[float], path, folded: Sequence[float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 180, 37)
    ax.hist(np.asarray(errors_deg, float), bins=bins, alpha=0.6, label="unfolded")
    if folded is not None:
        ax.hist(np.asarray(folded, float), bins=bins, alpha=0.6, label="symmetry-folded")
    ax.set_xlabel("rotation error [deg]")
    ax.set_ylabel("objects")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def snapshot(target_rgb, pred_rgb, target_depth, pred_depth, path, far: float = 12.0) -> Path:
    """2x2 panel: target and predicted color (top), depth (bottom)."""
    fig, axes = plt.subplots(2, 2, figsize=(5, 5))
    panels = [(target_rgb, "target"), (pred_rgb, "fit"), (target_depth, "target depth"), (pred_depth, "fit depth")]
    for ax, (img, title) in zip(axes.ravel(), panels):
        img = np.asarray(img, float)
        if img.ndim == 3:
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        else:
            ax.imshow(img, cmap="viridis", vmin=float(np.min(img)), vmax=far, interpolation="nearest")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def render_panel(rgb, depth, ids, path, far: float = 12.0) -> Path:
    """Color, depth and instance ids side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    axes[0].imshow(np.clip(rgb, 0, 1), interpolation="nearest")
    axes[1].imshow(depth, cmap="viridis", vmin=float(np.min(depth)), vmax=far, interpolation="nearest")
    axes[2].imshow(ids, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    for ax, title in zip(axes, ("color", "depth", "instances")):
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def dataset_sheet(rgbs: Sequence, masks: Sequence, names: Sequence[str], path) -> Path:
    """First scenes of a dataset: color on top, instance ids below."""
    n = len(rgbs)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for k in range(n):
        axes[0, k].imshow(np.clip(rgbs[k], 0, 1), interpolation="nearest")
        axes[0, k].set_title(names[k], fontsize=7)
        axes[1, k].imshow(masks[k], cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        axes[0, k].axis("off")
        axes[1, k].axis("off")
    fig.tight_layout()
    return _save(fig, path)
