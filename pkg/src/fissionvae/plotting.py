"""Figures written next to the CSV/JSON reports."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _meta(config_hash):
    # PNG text chunk, so every figure names the run it came from
    return {"Description": f"config_hash={config_hash}"} if config_hash else None


def loss_curve(records, path, title=None, config_hash=""):
    """Aggregate training loss per round, one point per round record."""
    rounds = [r["round"] for r in records if "aggregate_loss" in r]
    losses = [r["aggregate_loss"] for r in records if "aggregate_loss" in r]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(rounds, losses, marker="o", ms=2.5, lw=1.2)
        ax.set_xlabel("round")
        ax.set_ylabel("mean training loss")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_meta(config_hash))
        plt.close(fig)
    return path


def sample_grid(images, path, side=None, title=None, ncols=8, config_hash=""):
    images = np.asarray(images)
    if images.ndim == 2:
        side = side or int(round(math.sqrt(images.shape[1])))
        images = images.reshape(len(images), side, side)
    n = max(len(images), 1)
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.8, nrows * 0.8 + (0.3 if title else 0)),
                                 squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, img in zip(axes.flat, images):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if title:
            fig.suptitle(title)
        fig.savefig(path, dpi=120, metadata=_meta(config_hash))
        plt.close(fig)
    return path


def metric_bars(reports, path, metric="frechet_proxy", config_hash=""):
    """One bar per (variant, pathway) row for a scalar metric."""
    labels = [f"{r['variant']}\n{r['pathway']}" for r in reports]
    values = [r[metric] for r in reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3, 1.2 * len(values)), 3))
        ax.bar(range(len(values)), values, color="0.4")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=0)
        ax.set_ylabel(metric)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_meta(config_hash))
        plt.close(fig)
    return path
