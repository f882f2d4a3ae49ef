"""Figures for the report command (horizon curves, criteria bars)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .eval import SCENARIO_IDS, CriteriaReport  # noqa: E402


def plot_horizon_curves(reports: Mapping[str, CriteriaReport], path) -> Path:
    """Per-depth aggregate RMSE on the test set, one line per model."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, rep in reports.items():
        m = rep.test_metrics
        if m is None:
            continue
        ax.plot(np.arange(1, m.H + 1), m.aggregate, marker=".", label=label)
    ax.set_xlabel("prediction depth [steps]")
    ax.set_ylabel("RMSE (normalized)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_criteria(reports: Mapping[str, CriteriaReport], path) -> Path:
    cols = ["full", "short", "long"] + [f"scenario{s}" for s in SCENARIO_IDS]
    labels = list(reports)
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(cols))
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, label in enumerate(labels):
        row = reports[label].as_row()
        ax.bar(x + i * width, [row[c] for c in cols], width, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2, cols, rotation=30)
    ax.set_yscale("log")
    ax.set_ylabel("accuracy score (normalized)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
