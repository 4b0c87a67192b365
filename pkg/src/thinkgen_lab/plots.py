"""Static curves drawn from metrics JSONL files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def moving_average(x, window: int = 50) -> np.ndarray:
    """Trailing mean over ``window`` points; the first ``window - 1`` points have no value."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def plot_metrics(path, out_dir, prefix: str = "run", window: int = 50) -> list[Path]:
    """Write ``<prefix>_reward.png`` and ``<prefix>_cot_len.png``; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = np.arange(len(rows))
    written = []
    for key, label in (("mean_reward", "reward"), ("mean_cot_len", "cot_len")):
        y = np.array([r.get(key, np.nan) for r in rows], dtype=np.float64)
        fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
        ax.plot(steps, y, lw=0.8, alpha=0.5, label=key)
        ma = moving_average(y, min(window, max(1, len(y))))
        if len(ma):
            ax.plot(steps[len(y) - len(ma):], ma, lw=1.6, label=f"{min(window, len(y))}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        p = out_dir / f"{prefix}_{label}.png"
        fig.savefig(p, metadata={"Software": None})
        plt.close(fig)
        written.append(p)
    return written
