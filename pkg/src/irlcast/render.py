"""Scenario and prediction rendering to layered SVG (and optional PNG).

Each logical layer is one matplotlib artist group whose gid becomes the SVG
group id, so downstream tools can address the fixed layers by name:
"lanes", "drivable", "reward", "plans", "predictions".
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .sampler import plan_to_polyline  # noqa: E402
from .scene import GridSpec, Scenario  # noqa: E402

LAYERS = ("lanes", "drivable", "reward", "plans", "predictions")

_PRED_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e",
                "#e6ab02", "#a6761d", "#666666", "#1f78b4", "#b2df8a")


def render_scenario(scenario: Scenario, prediction=None, svg_path: str = None,
                    png_path: str | None = None, layers=LAYERS,
                    max_plans: int = 50) -> None:
    """Draw the scene in the target frame and write SVG (and PNG) files."""
    grid = scenario.grid
    half = grid.extent / 2.0
    fig, ax = plt.subplots(figsize=(7, 7))
    fig.suppressComposite = True   # keep per-layer ids on raster artists
    ax.set_xlim(-half, half)
    ax.set_ylim(-half, half)
    ax.set_aspect("equal")
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(scenario.id)

    if "drivable" in layers:
        art = ax.imshow(scenario.drivable_mask, origin="lower",
                        extent=(-half, half, -half, half),
                        cmap="Greys", alpha=0.25, vmin=0, vmax=1.6,
                        interpolation="nearest")
        art.set_gid("drivable")

    if "reward" in layers and prediction is not None:
        art = ax.imshow(prediction.reward, origin="lower",
                        extent=(-half, half, -half, half),
                        cmap="viridis", alpha=0.45, interpolation="nearest")
        art.set_gid("reward")

    if "lanes" in layers and scenario.lanes:
        lc = LineCollection([ln.centerline for ln in scenario.lanes],
                            colors="#4477aa", linewidths=1.2)
        lc.set_gid("lanes")
        ax.add_collection(lc)

    if "plans" in layers and prediction is not None and prediction.plans:
        coarse = GridSpec(prediction.reward.shape[0],
                          grid.extent / prediction.reward.shape[0])
        lines = [plan_to_polyline(p, coarse)
                 for p in prediction.plans[:max_plans] if len(p.states) > 1]
        if lines:
            lc = LineCollection(lines, colors="#888888", linewidths=0.5,
                                alpha=0.35)
            lc.set_gid("plans")
            ax.add_collection(lc)

    if "predictions" in layers and prediction is not None:
        k = prediction.trajectories.shape[0]
        colors = [_PRED_COLORS[i % len(_PRED_COLORS)] for i in range(k)]
        lc = LineCollection(list(prediction.trajectories), colors=colors,
                            linewidths=2.0)
        lc.set_gid("predictions")
        ax.add_collection(lc)
        for i in range(k):
            end = prediction.trajectories[i, -1]
            label = ax.annotate(f"p={prediction.probabilities[i]:.2f}",
                                xy=end, fontsize=7, color=colors[i])
            label.set_gid(f"prediction-label-{i}")

    # observed history and ground truth carry no fixed layer contract
    target = scenario.target()
    hist = target.track[target.track[:, 3] > 0.5][:, 1:3]
    ax.plot(hist[:, 0], hist[:, 1], color="#cc3311", linewidth=1.8)
    if scenario.gt_future is not None:
        ax.plot(scenario.gt_future[:, 1], scenario.gt_future[:, 2],
                color="#ee3377", linewidth=1.2, linestyle="--")

    if svg_path:
        fig.savefig(svg_path, format="svg")
    if png_path:
        fig.savefig(png_path, format="png", dpi=120)
    plt.close(fig)
