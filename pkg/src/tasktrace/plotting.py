"""Figures written next to the metric tables."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from tasktrace.evaluation import MetricsReport  # noqa: E402

PANELS = (("recall", "Recall"), ("fpr", "FP rate"), ("accuracy", "Accuracy"),
          ("specificity", "Specificity"))
STYLE = {"trace": dict(color="#1f77b4", marker="o"), "task": dict(color="#d62728", marker="s")}


def plot_metric_sweep(reports: Sequence[MetricsReport], path: str | Path,
                      title: str | None = None) -> Path:
    """One panel per metric against the number of candidates, trace and task curves."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(PANELS), figsize=(4 * len(PANELS), 3.4))
    for ax, (attr, label) in zip(axes, PANELS):
        for mode in ("trace", "task"):
            pts = [(r.candidates, getattr(r, attr)) for r in reports
                   if r.mode == mode and getattr(r, attr) is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=mode, lw=1.5, ms=4, **STYLE[mode])
        ax.set_xlabel("#candidates")
        ax.set_ylabel(label)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_log(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["mean_loss"] for h in history], label="train")
    val = [h["val_loss"] for h in history]
    if any(v == v for v in val):
        ax.plot(epochs, val, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
