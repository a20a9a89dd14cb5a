"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLORS = {"G": "#1f77b4", "L": "#ff7f0e", "GL": "#2ca02c", "R": "#7f7f7f"}


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_log(log_path, out_path) -> Path:
    with open(log_path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    steps = np.array([r["step"] for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    ax = axes[0]
    ax.plot(steps, [r["l_total"] for r in rows], lw=1, color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax = axes[1]
    for key in ("l_mpl", "l_usp", "l_simclr", "l_orth"):
        ax.plot(steps, [r[key] for r in rows], lw=1, label=key[2:])
    ax.set_xlabel("step")
    ax.set_ylabel("component")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, out_path)


def plot_layer_weights(rows, out_path, title: str | None = None) -> Path:
    """Grouped bars of normalised layer weight per mode; one panel per task.

    ``rows`` are dicts with task, mode, layer, weight (the CSV rows).
    """
    tasks = sorted({r["task"] for r in rows})
    fig, axes = plt.subplots(len(tasks), 1, figsize=(6, 2.6 * len(tasks)), squeeze=False)
    for ax, task in zip(axes[:, 0], tasks):
        sub = [r for r in rows if r["task"] == task]
        modes = [m for m in MODE_COLORS if any(r["mode"] == m for r in sub)]
        layers = sorted({int(r["layer"]) for r in sub})
        width = 0.8 / max(len(modes), 1)
        for k, mode in enumerate(modes):
            w = {int(r["layer"]): float(r["weight"]) for r in sub if r["mode"] == mode}
            xs = np.array(layers) + (k - (len(modes) - 1) / 2) * width
            ax.bar(xs, [w.get(l, 0.0) for l in layers], width, label=mode,
                   color=MODE_COLORS[mode])
        ax.set_xticks(layers)
        ax.set_xlabel("transformer layer")
        ax.set_ylabel("weight")
        ax.set_title(task)
        ax.legend(frameon=False, fontsize=8, ncol=len(modes))
    if title:
        fig.suptitle(title)
    return _finish(fig, out_path)


def plot_accuracies(summary: dict, out_path) -> Path:
    """Bar chart of test accuracy per classifier (``{"G": 0.4, ...}``)."""
    names = list(summary)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(names, [summary[n] for n in names],
           color=[MODE_COLORS.get(n, "#9467bd") for n in names])
    ax.set_ylim(0, 1)
    ax.set_ylabel("test accuracy")
    return _finish(fig, out_path)
