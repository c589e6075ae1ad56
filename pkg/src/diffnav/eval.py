"""Closed-loop and one-shot rollouts plus the benchmark metrics.

Episodes are independent given a frozen policy and their own RNG streams,
so suites may run concurrently; metric aggregation is a plain reduction.
The contact rule: executed motion truncates at the first unsafe sample and
the episode continues with the agent stopped at the contact point.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .policy import (
    CallCounter,
    Observation,
    Policy,
    action_to_world_trajectory,
    sample_ddim_action,
    sample_ddpm_actions,
)
from .scene import GeodesicField, Point2, Scene, first_contact
from .sidp import make_observation

SUCCESS_RADIUS = 0.5  # meters

# In-place rotation applied when a replan produces no motion (pinned agent).
STUCK_TURN = 2.0 * math.pi / 5.0


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    path_length: float      # P: executed meters
    shortest: float         # L: geodesic start-goal distance
    collided: bool
    final_dist: float
    steps_used: int


@dataclass(frozen=True)
class MetricsReport:
    sr: float          # percent
    spl: float         # percent
    cr: float          # percent
    dtg: float         # meters
    episodes: int
    ea: float | None = None  # square meters, goal-agnostic suites only


def make_planner(policy: Policy, sampler: str = "ddpm", steps: int | None = None,
                 counter: CallCounter | None = None):
    """Bind a policy and sampler config into a planner(obs, rng, heading).

    The policy samples actions in the agent frame; the planner rotates them
    by the given heading into a world-frame trajectory.
    """
    cfg = policy.cfg
    if sampler == "ddpm":
        def plan(obs, rng, heading=0.0):
            x = sample_ddpm_actions(policy, obs, 1, rng, counter=counter)[0]
            return action_to_world_trajectory(x, heading, cfg.a_max, cfg.horizon)
    elif sampler == "ddim":
        n = policy.sched.T if steps is None else steps

        def plan(obs, rng, heading=0.0):
            x = sample_ddim_action(policy, obs, n, rng.standard_normal(cfg.action_dim),
                                   counter=counter)
            return action_to_world_trajectory(x, heading, cfg.a_max, cfg.horizon)
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")
    plan.n_rays = cfg.n_rays
    plan.max_range = cfg.max_range
    return plan


def rollout_closed_loop(
    planner,
    scene: Scene,
    start: Point2,
    goal: Point2,
    geo: GeodesicField,
    rng: np.random.Generator,
    budget: int = 200,
    success_radius: float = SUCCESS_RADIUS,
    waypoints_per_replan: int = 1,
    trace: list | None = None,
) -> EpisodeResult:
    """Receding-horizon navigation: replan, execute a prefix, repeat.

    Each replan samples one trajectory at the current pose and executes its
    first waypoints_per_replan displacements with collision truncation.
    Terminates on reaching success_radius of the goal or on budget
    exhaustion; path length accumulates executed motion only.  When trace
    is a list, visited positions are appended to it.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    shortest = geo.at(start)
    if not math.isfinite(shortest):
        raise ContractViolation("start unreachable in the provided geodesic field")
    shortest = max(shortest, 1e-9)

    pos = start.copy()
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    if trace is not None:
        trace.append(pos.copy())
    path = 0.0
    collided = False
    replans = 0
    while float(np.hypot(*(goal - pos))) >= success_radius and replans < budget:
        obs = make_observation(scene, pos, goal, heading=heading,
                               n_rays=_n_rays(planner), max_range=_max_range(planner))
        traj = planner(obs, rng, heading)
        advanced = False
        for wp in traj.waypoints(pos)[:waypoints_per_replan]:
            before = pos
            stop, hit = first_contact(scene.esdf, pos, wp, scene.robot_radius)
            path += float(np.hypot(*(stop - pos)))
            pos = stop
            moved = pos - before
            if float(np.hypot(*moved)) > 1e-9:
                heading = math.atan2(moved[1], moved[0])
                advanced = True
            if trace is not None:
                trace.append(pos.copy())
            if hit:
                collided = True
                break
            if float(np.hypot(*(goal - pos))) < success_radius:
                break
        if not advanced:
            # pinned against an obstacle: rotate in place to look around
            # (heading is only implied by motion, so a stalled frame would
            # otherwise freeze the observation forever)
            heading += STUCK_TURN
        replans += 1
    final_dist = float(np.hypot(*(goal - pos)))
    return EpisodeResult(
        success=final_dist < success_radius,
        path_length=path,
        shortest=shortest,
        collided=collided,
        final_dist=final_dist,
        steps_used=replans,
    )


def rollout_exploration(
    planner,
    scene: Scene,
    start: Point2,
    rng: np.random.Generator,
    replans: int = 30,
    trace: list | None = None,
) -> bool:
    """Goal-masked wandering for the goal-agnostic suite; returns collided."""
    pos = np.asarray(start, dtype=np.float64).copy()
    heading = float(rng.uniform(-math.pi, math.pi))
    collided = False
    for _ in range(replans):
        obs = make_observation(scene, pos, None, heading=heading,
                               n_rays=_n_rays(planner), max_range=_max_range(planner))
        traj = planner(obs, rng, heading)
        wp = traj.waypoints(pos)[0]
        before = pos
        stop, hit = first_contact(scene.esdf, pos, wp, scene.robot_radius)
        pos = stop
        moved = pos - before
        if float(np.hypot(*moved)) > 1e-9:
            heading = math.atan2(moved[1], moved[0])
        else:
            heading += STUCK_TURN
        if trace is not None:
            trace.append(pos.copy())
        collided = collided or hit
    return collided


def rollout_one_shot(
    planner,
    scene: Scene,
    start: Point2,
    goal: Point2,
    geo: GeodesicField,
    rng: np.random.Generator,
    success_radius: float = SUCCESS_RADIUS,
    trace: list | None = None,
) -> EpisodeResult:
    """Single inference; the agent follows all waypoints of one plan.

    Success requires some waypoint to come within success_radius of the
    goal before any collision; execution truncates at contact.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    shortest = max(geo.at(start), 1e-9)
    if not math.isfinite(shortest):
        raise ContractViolation("start unreachable in the provided geodesic field")

    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    obs = make_observation(scene, start, goal, heading=heading,
                           n_rays=_n_rays(planner), max_range=_max_range(planner))
    traj = planner(obs, rng, heading)
    pos = start.copy()
    if trace is not None:
        trace.append(pos.copy())
    path = 0.0
    collided = False
    success = float(np.hypot(*(goal - pos))) < success_radius
    executed = 0
    for wp in traj.waypoints(start):
        stop, hit = first_contact(scene.esdf, pos, wp, scene.robot_radius)
        path += float(np.hypot(*(stop - pos)))
        pos = stop
        if trace is not None:
            trace.append(pos.copy())
        if hit:
            collided = True
            break
        executed += 1
        if float(np.hypot(*(goal - pos))) < success_radius:
            success = True
    return EpisodeResult(
        success=success,
        path_length=path,
        shortest=shortest,
        collided=collided,
        final_dist=float(np.hypot(*(goal - pos))),
        steps_used=executed,
    )


def compute_metrics(results) -> MetricsReport:
    """Aggregate SR, SPL, CR and DTG over a nonempty episode list."""
    results = list(results)
    if not results:
        raise ContractViolation("compute_metrics requires at least one episode")
    n = len(results)
    sr = 100.0 * sum(r.success for r in results) / n
    spl = 100.0 * sum(
        (1.0 if r.success else 0.0) * r.shortest / max(r.path_length, r.shortest)
        for r in results
    ) / n
    cr = 100.0 * sum(r.collided for r in results) / n
    dtg = sum(r.final_dist for r in results) / n
    return MetricsReport(sr=sr, spl=spl, cr=cr, dtg=dtg, episodes=n)


# ---------------------------------------------------------------------------
# Exploration area
# ---------------------------------------------------------------------------

def swept_union_area(chains, width: float = 0.2, cell: float = 0.02) -> float:
    """Area of the union of capsule-swept waypoint chains.

    Each chain is modelled as segments of radius width/2 (a zero-length
    chain degenerates to a disc stamp); the union is rasterized on a grid
    of the given cell size.
    """
    radius = width / 2.0
    pts = np.vstack([np.asarray(c, dtype=np.float64) for c in chains])
    lo = pts.min(axis=0) - (radius + cell)
    hi = pts.max(axis=0) + (radius + cell)
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / cell)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / cell)))
    xs = lo[0] + (np.arange(nx) + 0.5) * cell
    ys = lo[1] + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    covered = np.zeros(len(centers), dtype=bool)
    for chain in chains:
        chain = np.asarray(chain, dtype=np.float64)
        for i in range(len(chain)):
            a = chain[max(i - 1, 0)]
            b = chain[i]
            ab = b - a
            denom = float(ab @ ab)
            rel = centers - a[None, :]
            if denom > 0:
                t = np.clip((rel @ ab) / denom, 0.0, 1.0)
                closest = a[None, :] + t[:, None] * ab[None, :]
            else:
                closest = np.broadcast_to(a, centers.shape)
            d2 = ((centers - closest) ** 2).sum(axis=1)
            covered |= d2 <= radius * radius
    return float(covered.sum()) * cell * cell


def exploration_area(
    planner,
    scene: Scene,
    start: Point2,
    rng: np.random.Generator,
    count: int = 16,
    width: float = 0.2,
    cell: float = 0.02,
) -> float:
    """Union area of `count` goal-masked trajectory corridors from start."""
    start = np.asarray(start, dtype=np.float64)
    heading = float(rng.uniform(-math.pi, math.pi))
    obs = make_observation(scene, start, None, heading=heading,
                           n_rays=_n_rays(planner), max_range=_max_range(planner))
    chains = []
    for _ in range(count):
        traj = planner(obs, rng, heading)
        chains.append(np.vstack([start[None, :], traj.waypoints(start)]))
    return swept_union_area(chains, width=width, cell=cell)


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

def latency_bench(policy: Policy, observations, configs, trials: int = 100,
                  warmup: int = 10, seed: int = 0) -> list[dict]:
    """Wall-clock sampling cost per (sampler, steps) config.

    Runs `warmup` untimed iterations, then averages `trials` timed single
    inferences; denoiser call counts are reported exactly per inference.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rows = []
    for sampler, steps in configs:
        counter = CallCounter()
        planner = make_planner(policy, sampler, steps, counter=counter)
        rng = np.random.default_rng(seed)
        for i in range(warmup):
            planner(observations[i % len(observations)], rng, 0.0)
        counter.calls = 0
        t0 = time.perf_counter()
        for i in range(trials):
            planner(observations[i % len(observations)], rng, 0.0)
        elapsed = time.perf_counter() - t0
        rows.append({
            "sampler": sampler,
            "steps": steps if steps is not None else policy.sched.T,
            "mean_ms": elapsed / trials * 1e3,
            "denoiser_calls": counter.calls // trials,
        })
    return rows


# planner metadata: planners built by make_planner carry the policy's
# observation geometry; plain callables fall back to the defaults.

def _n_rays(planner) -> int:
    return getattr(planner, "n_rays", 16)


def _max_range(planner) -> float:
    return getattr(planner, "max_range", 3.0)
