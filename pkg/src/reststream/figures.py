"""Figure rendering for benchmark and training reports.

Matplotlib is imported lazily with the Agg backend so headless runs work and
commands that never plot stay light.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_latency_figure(reports: Sequence, path: str | Path) -> Path:
    """Median latency vs clip length, one line per model, p90 as whiskers."""
    plt = _pyplot()
    path = Path(path)
    by_model: dict[str, list] = {}
    for r in reports:
        by_model.setdefault(r.model_id, []).append(r)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for model_id, rows in by_model.items():
        rows = sorted(rows, key=lambda r: r.clip_seconds)
        x = [r.clip_seconds for r in rows]
        med = [r.median_ns / 1e6 for r in rows]
        p90 = [r.p90_ns / 1e6 for r in rows]
        ax.plot(x, med, marker="o", label=model_id)
        ax.vlines(x, med, p90, alpha=0.4)
    ax.set_xlabel("clip length (s)")
    ax.set_ylabel("latency per clip (ms)")
    ax.set_title("single-clip inference latency (median, whisker to p90)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_history_figure(history: Sequence, path: str | Path) -> Path:
    """Train and validation loss per epoch."""
    plt = _pyplot()
    path = Path(path)
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, [h.train_loss for h in history], label="train")
    ax.plot(epochs, [h.val_loss for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training curves")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
