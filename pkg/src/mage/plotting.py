"""Figures written next to the CSV outputs (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ExperimentReport  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[tuple[int, float, float, float]], path: str | Path, title: str = "") -> Path:
    """``rows`` as returned by :func:`mage.training.read_metrics`."""
    arr = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    if arr.size:
        for col, label in ((1, "itg"), (2, "itdm"), (3, "total")):
            ax.plot(arr[:, 0], arr[:, col], label=label)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title or "training loss")
    return _save(fig, path)


def plot_reports(reports: Sequence[ExperimentReport], path: str | Path, metric: str = "heldout_distance") -> Path:
    """Per-arm metric, one marker per seed plus the arm mean."""
    arms = list(dict.fromkeys(r.arm for r in reports))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, arm in enumerate(arms):
        vals = [getattr(r, metric) for r in reports if r.arm == arm]
        ax.scatter([i] * len(vals), vals, alpha=0.6)
        ax.hlines(np.mean(vals), i - 0.3, i + 0.3, colors="k")
    ax.set_xticks(range(len(arms)), arms)
    ax.set_ylabel(metric)
    return _save(fig, path)


def save_attention_png(img: np.ndarray, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
    ax.set_axis_off()
    return _save(fig, path)
