"""Figures for evaluation reports: flow panels and training curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flowio import flow_to_color  # noqa: E402
from .metrics import endpoint_error  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 7.0  # inches

params = {
    "font.family": "serif",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def setup() -> None:
    plt.rcParams.update(params)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def flow_panel(frame, pred, gt=None, path="flow.png", title=None) -> Path:
    """Frame, predicted flow, ground truth and EPE map side by side."""
    setup()
    frame = np.asarray(frame)
    pred = np.asarray(pred)
    panels = [("frame", np.clip(frame, 0, 1), None)]
    scale = None
    if gt is not None:
        gt = np.asarray(gt)
        scale = float(np.percentile(np.hypot(gt[..., 0], gt[..., 1]), 99)) or None
    panels.append(("prediction", flow_to_color(pred, scale), None))
    if gt is not None:
        panels.append(("ground truth", flow_to_color(gt, scale), None))
        panels.append(("EPE (px)", endpoint_error(pred, gt), "magma"))
    fig, axes = plt.subplots(1, len(panels), figsize=(fig_width, fig_width / len(panels) + 0.4))
    axes = np.atleast_1d(axes)
    for ax, (name, img, cmap) in zip(axes, panels):
        im = ax.imshow(img.squeeze(), cmap=cmap, interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        if cmap is not None:
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def training_curves(rows, path="curves.png", threshold: float | None = 1.0) -> Path:
    """Loss against step and, where logged, held-out AEPE."""
    setup()
    steps = [r["step"] for r in rows if r.get("loss") is not None]
    loss = [r["loss"] for r in rows if r.get("loss") is not None]
    ev = [(r["step"], r["aepe"]) for r in rows if r.get("aepe") is not None]
    ncols = 2 if ev else 1
    fig, axes = plt.subplots(1, ncols, figsize=(fig_width, fig_width * golden_mean / ncols + 0.6))
    axes = np.atleast_1d(axes)
    axes[0].plot(steps, loss, color="0.5", lw=0.6)
    if len(loss) >= 20:
        k = 20
        axes[0].plot(steps[k - 1:], np.convolve(loss, np.ones(k) / k, mode="valid"), color="C0")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    if ev:
        s, a = zip(*ev)
        axes[1].plot(s, a, "o-", ms=2, color="C1")
        if threshold is not None:
            axes[1].axhline(threshold, color="k", ls="--", lw=0.6)
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("held-out AEPE (px)")
    return _save(fig, path)


def epe_histogram(epe, path="epe_hist.png", bins: int = 50) -> Path:
    setup()
    epe = np.asarray(epe).ravel()
    fig, ax = plt.subplots(figsize=(fig_width / 2, fig_width / 2 * golden_mean))
    ax.hist(epe, bins=bins, color="C0", log=True)
    ax.axvline(3.0, color="k", ls="--", lw=0.6)
    ax.set_xlabel("EPE (px)")
    ax.set_ylabel("pixels")
    return _save(fig, path)
