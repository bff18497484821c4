"""SVG figures for attention traces, training curves and the benchmark.

Output is reproducible byte for byte: fixed hash salt, no date metadata,
glyphs drawn as paths, and cells drawn as vector patches (no embedded PNG).
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

# eight stops sampled from viridis
RAMP = ("#440154", "#46327e", "#365c8d", "#277f8e", "#1fa187", "#4ac16d", "#a0da39", "#fde725")
CMAP = LinearSegmentedColormap.from_list("glied_ramp", RAMP)

_RC = {
    "svg.hashsalt": "glied",
    "svg.fonttype": "path",
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "glied"})
    plt.close(fig)
    return path


def _colorbar(fig, mesh, ax):
    # long colorbars are rasterized by default; keep them vector
    fig.colorbar(mesh, ax=ax, shrink=0.8).solids.set_rasterized(False)


def _heatmap(ax, weights: np.ndarray, xlabels, ylabels):
    mesh = ax.pcolormesh(weights, cmap=CMAP, vmin=0.0, vmax=1.0, edgecolors="white", linewidth=0.3)
    ax.set_xticks(np.arange(weights.shape[1]) + 0.5)
    ax.set_xticklabels(xlabels, rotation=60, ha="right")
    ax.set_yticks(np.arange(weights.shape[0]) + 0.5)
    ax.set_yticklabels(ylabels)
    ax.invert_yaxis()
    ax.set_aspect("equal")
    return mesh


def region_grid(weights: np.ndarray, path, labels: Sequence[str] | None = None, title: str = "region self-attention"):
    """k x k self-attention over regions (rows attend to columns)."""
    k = weights.shape[0]
    labels = list(labels) if labels is not None else [f"r{i}" for i in range(k)]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.35 * k, 1.0 + 0.35 * k))
        mesh = _heatmap(ax, weights, labels, labels)
        _colorbar(fig, mesh, ax)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def timestep_heatmap(weights: np.ndarray, path, words: Sequence[str], keys: Sequence[str], title: str):
    """One row per generated word, one column per attended key."""
    t, k = weights.shape
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.6 + 0.35 * k, 1.0 + 0.3 * t))
        mesh = _heatmap(ax, weights, keys, words)
        _colorbar(fig, mesh, ax)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def collocation_bars(weights: np.ndarray, path, words: Sequence[str], attributes: Sequence[str],
                     title: str = "attribute collocation"):
    """A small bar chart of the attribute weights for each timestep."""
    t, k = weights.shape
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(t, 1, figsize=(1.4 + 0.4 * k, 0.7 * t + 0.6), sharex=True, squeeze=False)
        x = np.arange(k)
        for i, ax in enumerate(axes[:, 0]):
            ax.bar(x, weights[i], color=[CMAP(w) for w in weights[i]], width=0.8)
            ax.set_ylim(0, 1)
            ax.set_yticks([])
            ax.set_ylabel(words[i], rotation=0, ha="right", va="center")
        axes[-1, 0].set_xticks(x)
        axes[-1, 0].set_xticklabels(attributes, rotation=60, ha="right")
        axes[0, 0].set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def training_curves(records: Sequence[dict], path, title: str = "training"):
    """Loss per epoch, with validation CIDEr-D on a twin axis when present."""
    epochs = [r["epoch"] for r in records]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(epochs, [r["loss"] for r in records], color=RAMP[1], marker="o", ms=3, label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ciders = [r.get("cider") for r in records]
        if any(c is not None for c in ciders):
            ax2 = ax.twinx()
            ax2.plot(epochs, [np.nan if c is None else c for c in ciders], color=RAMP[5], marker="s", ms=3)
            ax2.set_ylabel("val CIDEr-D")
            ax2.spines["right"].set_visible(True)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def benchmark_bars(summary: dict, path, metrics: Sequence[str] = ("CIDEr-D", "count", "relations")):
    """Mean with standard-error bars per variant, one panel per metric."""
    variants = [v for v in summary if v != "scst"]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(2.4 * len(metrics), 2.6), squeeze=False)
        for ax, m in zip(axes[0], metrics):
            means = [summary[v][m]["mean"] for v in variants]
            ses = [summary[v][m]["se"] for v in variants]
            ax.bar(variants, means, yerr=ses, capsize=3,
                   color=[RAMP[2 + 3 * i % 6] for i in range(len(variants))])
            lo = min(mu - s for mu, s in zip(means, ses))
            hi = max(mu + s for mu, s in zip(means, ses))
            pad = 0.15 * (hi - lo) + 1e-6
            ax.set_ylim(max(0.0, lo - 3 * pad), hi + pad)
            ax.set_title(m)
        fig.tight_layout()
        return _save(fig, path)
