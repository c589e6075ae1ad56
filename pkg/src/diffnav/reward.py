"""Trajectory quality metric: collision, step-cost, progress and docking terms.

All functions here are pure; identical inputs produce bitwise-identical
breakdowns, so reward evaluation may run concurrently against shared
immutable scene data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateEpisodeError, DiffnavError
from .policy import Trajectory
from .scene import GeodesicField, Point2, Scene, collision_check


@dataclass(frozen=True)
class RewardConfig:
    """Component gains; docking activates inside delta_fine of the goal."""

    lambda_col: float = 10.0
    lambda_step: float = 0.5
    lambda_prog: float = 5.0
    lambda_dock: float = 10.0
    delta_fine: float = 0.5     # meters
    dock_sharpness: float = 5.0  # exponent coefficient of the docking kernel

    def __post_init__(self):
        if min(self.lambda_col, self.lambda_step, self.lambda_prog, self.lambda_dock) <= 0:
            raise ContractViolation("all reward gains must be positive")
        if self.delta_fine <= 0:
            raise ContractViolation("delta_fine must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_col: float
    r_step: float
    r_prog: float
    r_dock: float
    total: float


def evaluate(
    scene: Scene,
    start: Point2,
    goal: Point2,
    geo: GeodesicField,
    traj: Trajectory,
    cfg: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    """Score one open-loop trajectory against a prepared scenario.

    The collision indicator covers the full chain (start prepended); the
    trajectory is not truncated at contact, the indicator alone carries the
    penalty.  Initial distance is geodesic; terminal distance is Euclidean.
    An unreachable or out-of-bounds final waypoint falls back to Euclidean
    progress (its collision flag is already raised by the chain check).
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    d_init = geo.at(start)
    if not math.isfinite(d_init):
        raise ContractViolation("start is unreachable in the provided geodesic field")
    if d_init == 0.0:
        raise DegenerateEpisodeError("start coincides with the goal cell")

    waypoints = traj.waypoints(start)
    chain = np.vstack([start[None, :], waypoints])
    collided = collision_check(scene.esdf, chain, scene.robot_radius).hit

    final = waypoints[-1]
    l_path = traj.length()
    d_t = float(np.hypot(*(final - goal)))
    g_final = geo.at(final)
    if math.isfinite(g_final):
        delta_geo = d_init - g_final
    else:
        delta_geo = float(np.hypot(*(start - goal))) - d_t

    r_col = -cfg.lambda_col if collided else 0.0
    r_step = -cfg.lambda_step * (l_path / d_init)
    r_prog = cfg.lambda_prog * delta_geo
    if d_t < cfg.delta_fine:
        ratio = d_t / d_init
        r_dock = cfg.lambda_dock * math.exp(-cfg.dock_sharpness * ratio * ratio)
    else:
        r_dock = 0.0

    return RewardBreakdown(
        r_col=r_col,
        r_step=r_step,
        r_prog=r_prog,
        r_dock=r_dock,
        total=r_col + r_step + r_prog + r_dock,
    )


def batch_evaluate(
    scene: Scene,
    start: Point2,
    goal: Point2,
    geo: GeodesicField,
    trajs,
    cfg: RewardConfig = RewardConfig(),
) -> list:
    """Elementwise evaluate, order preserving.

    Per-element failures are returned as None markers instead of aborting
    the whole batch.
    """
    out = []
    for traj in trajs:
        try:
            out.append(evaluate(scene, start, goal, geo, traj, cfg))
        except DiffnavError:
            out.append(None)
    return out
