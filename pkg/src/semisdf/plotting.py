"""Figures written next to the CSV reports (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history, path) -> Path:
    """Epoch means of the loss terms for one training run (log scale)."""
    epochs = sorted({r["epoch"] for r in history})
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in ("total", "sup_term", "self_term"):
        means = [np.mean([r[col] for r in history if r["epoch"] == e]) for e in epochs]
        if np.any(np.asarray(means) > 0):
            ax.plot(epochs, means, marker=".", label=col)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    ax.legend()
    return _save(fig, path)


def plot_noise(rows, path) -> Path:
    """Chamfer distance against the variance of the input noise."""
    var = [r["variance"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(var, [r["cd_mean"] for r in rows], marker="o", label="mean")
    ax.plot(var, [r["cd_median"] for r in rows], marker="s", label="median")
    ax.set_xlabel("noise variance")
    ax.set_ylabel("Chamfer distance")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def _finite(v):
    v = np.asarray(v, dtype=np.float64)
    return v[np.isfinite(v)]


def plot_ablation(report, path) -> Path:
    """Box plot of CD per arm, seen and unseen shapes side by side."""
    arms = sorted({r["arm"] for r in report.records})
    splits = sorted({r["split"] for r in report.records})
    fig, axes = plt.subplots(1, len(splits), figsize=(4 * max(len(splits), 1) + 1, 4), squeeze=False)
    for ax, split in zip(axes[0], splits):
        data = [_finite(report.cds(arm=a, split=split)) for a in arms]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(arms) + 1), arms)
        ax.set_yscale("log")
        ax.set_title(f"{split} shapes")
        ax.set_ylabel("Chamfer distance")
        ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def plot_category_cd(report, path) -> Path:
    """Median CD per category for a single-checkpoint evaluation."""
    cats = sorted({r["category"] for r in report.records})
    med = []
    for c in cats:
        v = _finite(report.cds(category=c))
        med.append(float(np.median(v)) if v.size else np.nan)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(cats, med)
    ax.set_ylabel("median Chamfer distance")
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
