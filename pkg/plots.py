"""Figures for sweeps and drive traces (PNG, non-interactive backend)."""
import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

import config  # noqa: E402
from eval_harness import SweepSummary  # noqa: E402
from telemetry import Trajectory, derive_states  # noqa: E402

logger = logging.getLogger(__name__)


def plot_sensitivity_sweep(summary: SweepSummary, path, double: bool = False) -> Path:
    """Precision and recall against sensitivity (single) or against pair number (double)."""
    if double:
        x = [row.config_id for row in summary.rows]
        xlabel = "sensitivity pair"
    else:
        x = [row.sen_1 for row in summary.rows]
        xlabel = "sensitivity"
    precision = [row.metrics.precision for row in summary.rows]
    recall = [row.metrics.recall for row in summary.rows]

    plt.figure(figsize=(7, 4))
    plt.plot(x, precision, "o-", label="precision")
    plt.plot(x, recall, "s--", label="recall")
    plt.xlabel(xlabel)
    plt.ylabel("rate")
    plt.ylim(0.0, 1.05)
    if double:
        plt.xticks(x)
    plt.grid(True)
    plt.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=120, bbox_inches="tight")
    plt.close()
    logger.info(f"Saved sweep plot to {path}")
    return path


def plot_trajectory(trajectory: Trajectory, path) -> Path:
    """East / north displacement from the first sample, coloured by derived speed."""
    lat0 = trajectory.samples[0].lat
    lng0 = trajectory.samples[0].lng
    north = np.array([math.radians(s.lat - lat0) * config.EARTH_RADIUS_M for s in trajectory.samples])
    east = np.array([math.radians(s.lng - lng0) * config.EARTH_RADIUS_M * math.cos(math.radians(lat0))
                     for s in trajectory.samples])
    speeds = [s.speed for s in derive_states(trajectory.samples)]

    plt.figure(figsize=(6, 6))
    plt.plot(east, north, color="lightgray", lw=1)
    points = plt.scatter(east[1:], north[1:], c=speeds, cmap="viridis", s=12)
    plt.colorbar(points, label="speed (m/s)")
    inside = trajectory.labels.astype(bool)
    plt.scatter(east[inside], north[inside], facecolors="none", edgecolors="red", s=40, label="maneuver")
    plt.axis("equal")
    plt.xlabel("east (m)")
    plt.ylabel("north (m)")
    plt.title(trajectory.kind)
    plt.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(path, dpi=120, bbox_inches="tight")
    plt.close()
    logger.info(f"Saved trajectory plot to {path}")
    return path
