"""Report figures rendered off-screen with matplotlib."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_trajectory(path, trajectory, reference=None):
    """Top-down (x, z) view of camera centres, optionally against a reference."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5), layout="constrained")
    c = trajectory.centers
    ax.plot(c[:, 0], c[:, 2], "o-", ms=3, label="estimate")
    if reference is not None:
        r = reference.centers
        ax.plot(r[:, 0], r[:, 2], "s--", ms=3, label="reference")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.set_title("camera centres")
    _save(fig, path)


def plot_cost_history(path, report):
    """Per-stage solver cost against iteration, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4), layout="constrained")
    for stage in report.stages:
        for i, solve in enumerate(stage.solves):
            costs = [solve.initial_cost] + [h["cost"] for h in solve.history]
            costs = np.maximum(np.asarray(costs, dtype=float), 1e-300)
            label = stage.name if len(stage.solves) == 1 else f"{stage.name} #{i + 1}"
            ax.semilogy(np.arange(len(costs)), costs, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cost")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("solver cost")
    _save(fig, path)
