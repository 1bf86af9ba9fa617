"""Static figures for inference, evaluation and training reports.

Everything renders through the non-interactive Agg backend straight to
PNG files, so the CLI works on headless machines.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "savefig.dpi": 120,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "depthfuse",
}
DEPTH_CMAP = "viridis"
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def _plane(arr) -> np.ndarray:
    a = np.asarray(arr)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    return a


def comparison_figure(path, rgb, raw, coarse, refined=None, gt=None, title: str = "") -> Path:
    """Side-by-side rgb | raw | coarse | refined | gt with one shared depth scale.

    Holes in ``raw`` (zeros) are drawn in white. ``rgb`` is (h, w, 3) or
    (3, h, w) in [0, 1].
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 4:
        rgb = rgb[0]
    if rgb.shape[0] == 3 and rgb.shape[-1] != 3:
        rgb = rgb.transpose(1, 2, 0)
    panels = [("raw", _plane(raw)), ("coarse", _plane(coarse))]
    if refined is not None:
        panels.append(("refined", _plane(refined)))
    if gt is not None:
        panels.append(("gt", _plane(gt)))
    valid = np.concatenate([p[p > 0].ravel() for _, p in panels if np.any(p > 0)] or [np.ones(1)])
    vmin, vmax = np.percentile(valid, [1, 99])
    if vmax <= vmin:
        vmax = vmin + 1e-3

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels) + 1, figsize=(2.0 * (len(panels) + 1), 2.3),
                                 constrained_layout=True)
        axes[0].imshow(np.clip(rgb, 0, 1))
        axes[0].set_title("rgb")
        cmap = plt.get_cmap(DEPTH_CMAP).copy()
        cmap.set_bad("white")
        im = None
        for ax, (name, plane) in zip(axes[1:], panels):
            shown = np.ma.masked_where(plane <= 0, plane) if name == "raw" else plane
            im = ax.imshow(shown, cmap=cmap, vmin=vmin, vmax=vmax)
            ax.set_title(name)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=list(axes[1:]), shrink=0.8, label="depth [m]")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def training_curves(path, history: Sequence[dict]) -> Path:
    """Train loss and validation RMSE per epoch."""
    epochs = [row["epoch"] for row in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_rmse) = plt.subplots(1, 2, figsize=(7.0, 2.6), constrained_layout=True)
        pts = [(row["epoch"], row["train_loss"]) for row in history if row.get("train_loss") not in (None, "")]
        if pts:
            ax_loss.plot(*zip(*pts), marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_rmse.plot(epochs, [row["val_rmse"] for row in history], marker="o", ms=3, label="output")
        if any(row.get("val_coarse_rmse") is not None for row in history):
            ax_rmse.plot(epochs, [row.get("val_coarse_rmse") for row in history], marker="s", ms=3,
                         ls="--", label="coarse")
        ax_rmse.set_xlabel("epoch")
        ax_rmse.set_ylabel("val RMSE [m]")
        ax_rmse.legend(frameon=False)
        return _save(fig, path)


def frame_scatter(path, coarse_rmse: Sequence[float], refined_rmse: Optional[Sequence[float]] = None,
                  labels: Optional[Sequence[str]] = None) -> Path:
    """Per-frame RMSE: refined versus coarse (or a bar chart without refinement)."""
    coarse_rmse = np.asarray(coarse_rmse, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.0), constrained_layout=True)
        if refined_rmse is None:
            ax.bar(np.arange(len(coarse_rmse)), coarse_rmse)
            ax.set_xlabel("frame")
            ax.set_ylabel("RMSE [m]")
        else:
            refined_rmse = np.asarray(refined_rmse, dtype=float)
            hi = float(np.nanmax(np.concatenate([coarse_rmse, refined_rmse, [1e-3]])))
            ax.plot([0, hi], [0, hi], color="0.6", lw=0.8)
            better = refined_rmse <= coarse_rmse
            ax.scatter(coarse_rmse[better], refined_rmse[better], s=10, label="refined <= coarse")
            ax.scatter(coarse_rmse[~better], refined_rmse[~better], s=10, marker="x",
                       label="refined > coarse")
            ax.set_xlabel("coarse RMSE [m]")
            ax.set_ylabel("refined RMSE [m]")
            ax.legend(frameon=False, loc="upper left")
        return _save(fig, path)


def bar_summary(path, values: dict, ylabel: str = "RMSE [m]") -> Path:
    """One bar per named configuration, e.g. an ablation grid."""
    names = list(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6), constrained_layout=True)
        ax.bar(names, [values[n] for n in names], color="C0")
        ax.set_ylabel(ylabel)
        ax.tick_params(axis="x", rotation=20)
        return _save(fig, path)
