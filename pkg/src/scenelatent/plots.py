"""Figure emission: latent-space scatter plots and top-down scenario views.

Plots are diagnostics, not data artifacts; they are excluded from the
byte-identity guarantees of the machine-readable outputs.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .latent import ClusterAssignment, EmbeddingTable, pca_project
from .scenarios import Scenario

# one sequential colormap per participant; later samples are darker
_TRAJECTORY_CMAPS = ("Blues", "Oranges", "Greens", "Reds", "Purples", "Greys")


def plot_latent_scatter(
    table: EmbeddingTable,
    path: str | Path,
    assignment: ClusterAssignment | None = None,
    color_by: str = "cluster",
    dims: int = 2,
) -> Path:
    """2D PCA scatter of the table, colored by cluster index or by label."""
    if color_by not in ("cluster", "label"):
        raise ValueError(f"color_by must be 'cluster' or 'label', got {color_by!r}")
    if color_by == "cluster" and assignment is None:
        raise ValueError("coloring by cluster requires a cluster assignment")
    projected, ratios, _ = pca_project(table, max(2, dims))
    fig, ax = plt.subplots(figsize=(7, 6))
    if color_by == "cluster":
        groups = {}
        for i, scenario_id in enumerate(table.ids):
            groups.setdefault(assignment.assignment[scenario_id], []).append(i)
        for cluster in sorted(groups):
            pts = projected[groups[cluster]]
            ax.scatter(pts[:, 0], pts[:, 1], s=8, label=f"cluster {cluster}")
    else:
        groups = {}
        for i, record in enumerate(table.records):
            key = record.label.value if record.label is not None else "unlabeled"
            groups.setdefault(key, []).append(i)
        for name in sorted(groups):
            pts = projected[groups[name]]
            color = "0.7" if name == "unlabeled" else None
            ax.scatter(pts[:, 0], pts[:, 1], s=8, label=name, color=color)
    ax.set_xlabel(f"PC 1 ({100 * ratios[0]:.1f}% var)")
    ax.set_ylabel(f"PC 2 ({100 * ratios[1]:.1f}% var)")
    ax.legend(fontsize=8)
    ax.set_title("latent space (PCA projection)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_scenario(scenario: Scenario, path: str | Path) -> Path:
    """Top-down view: ego as a fixed marker at the origin facing +y,
    participant positions shaded darker as time advances."""
    fig, ax = plt.subplots(figsize=(5, 7))
    t_max = max(scenario.duration, 1e-9)
    for i, traj in enumerate(sorted(scenario.trajectories, key=lambda t: t.participant_id)):
        cmap = plt.get_cmap(_TRAJECTORY_CMAPS[i % len(_TRAJECTORY_CMAPS)])
        xs = [s.x for s in traj.samples]
        ys = [s.y for s in traj.samples]
        # map time to [0.3, 1.0] so the earliest samples stay visible
        shades = [0.3 + 0.7 * (s.t / t_max) for s in traj.samples]
        ax.scatter(xs, ys, c=shades, cmap=cmap, vmin=0.0, vmax=1.0, s=18,
                   label=traj.participant_id)
    ax.plot(0, 0, marker="^", color="black", markersize=12, linestyle="none", label="ego")
    ax.axhline(0.0, color="0.85", linewidth=0.8, zorder=0)
    ax.axvline(0.0, color="0.85", linewidth=0.8, zorder=0)
    ax.set_xlabel("lateral offset x (m, positive = left)")
    ax.set_ylabel("longitudinal offset y (m, positive = ahead)")
    ax.set_title(scenario.scenario_id)
    ax.legend(fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
