"""Static figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import LABELS  # noqa: E402


def _floats(rows, key):
    out = []
    for r in rows:
        v = r.get(key, "")
        out.append(float(v) if v not in ("", None) else np.nan)
    return np.asarray(out)


def plot_history(history: Sequence[dict], path) -> Path:
    """Loss, learning rate and validation metric per epoch."""
    path = Path(path)
    epochs = _floats(history, "epoch")
    val_key = next((k for k in ("val_maxf", "val_accuracy") if history and k in history[0]), None)
    ncols = 3 if val_key else 2
    fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 3.2))
    axes[0].plot(epochs, _floats(history, "loss"), color="k", lw=1.2)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[1].plot(epochs, _floats(history, "lr"), color="tab:blue", lw=1.2)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("learning rate")
    if val_key:
        v = _floats(history, val_key)
        ok = ~np.isnan(v)
        axes[2].plot(epochs[ok], v[ok], "o-", color="tab:red", ms=3, lw=1)
        axes[2].set_xlabel("epoch")
        axes[2].set_ylabel(val_key.replace("_", " "))
        axes[2].set_ylim(0, 1.02)
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion(preds: Sequence[str], gts: Sequence[str], path) -> Path:
    path = Path(path)
    mat = np.zeros((2, 2), dtype=int)
    for p, g in zip(preds, gts):
        if p in LABELS and g in LABELS:
            mat[LABELS.index(g), LABELS.index(p)] += 1
    fig, ax = plt.subplots(figsize=(3.4, 3))
    ax.imshow(mat, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(mat[i, j]), ha="center", va="center",
                    color="white" if mat[i, j] > mat.max() / 2 else "black")
    ax.set_xticks([0, 1], LABELS)
    ax.set_yticks([0, 1], LABELS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_score_bars(report: dict, path, keys: Sequence[str]) -> Path:
    """Horizontal bars of the [0, 1] scores in a metrics report."""
    path = Path(path)
    keys = [k for k in keys if report.get(k) is not None]
    vals = [report[k] for k in keys]
    fig, ax = plt.subplots(figsize=(4.5, 0.45 * len(keys) + 1))
    ax.barh(keys, vals, color="0.4")
    for y, v in enumerate(vals):
        ax.text(min(v + 0.01, 0.9), y, f"{v:.3f}", va="center", fontsize=8)
    ax.set_xlim(0, 1)
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
