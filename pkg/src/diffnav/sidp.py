"""Self-imitation training engine.

One training step: sample N candidate trajectories per scenario from the
frozen policy snapshot (DDPM, so sampling stochasticity supplies the
exploration), score them with the reward engine, gate scenarios by
learning potential, keep the top-k candidates of each surviving scenario,
weight them, and take one optimizer step on the weighted denoising loss.

Goal-agnostic scenarios mask the goal in the observation and always carry
uniform weights; they act as exploration-preserving regularization.

Randomness is derived from integer seeds through named substreams keyed by
(seed, purpose, iteration, slot), so results do not depend on evaluation
order and reruns are bit-identical.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, SamplingExhaustedError
from .policy import (
    Observation,
    Policy,
    Trajectory,
    action_to_world_trajectory,
    adamw_step,
    clip_to_disc,
    denoiser_grad,
    forward_noise,
    new_adamw_state,
    rotation,
    sample_ddpm_actions,
    trajectory_from_deltas,
    world_deltas_to_action,
)
from .reward import RewardConfig, batch_evaluate
from .rng import spawn_seed, substream
from .scene import (
    GeodesicField,
    Point2,
    Scene,
    collision_check,
    geodesic_field,
    inflated_grid,
    query_esdf,
    raycast,
    sample_start_goal,
)

GOAL_AGNOSTIC_ANGLE_RANGE = (-math.pi / 3.0, math.pi / 3.0)
GOAL_AGNOSTIC_DIST_RANGE = (3.0, 5.0)
# Goal-agnostic distances are scaled by side/5 on scenes smaller than 5 m so
# sampled goals can stay in bounds; the stated range applies from 5 m up.
GOAL_AGNOSTIC_REFERENCE_SIDE = 5.0


@dataclass(frozen=True)
class SidpConfig:
    n_candidates: int = 16
    top_k: int = 4
    tau: float = 1.0
    weight_mode: str = "softmax"  # or "linear"
    goal_agnostic_fraction: float = 0.25
    min_best_reward: float = 0.0   # curriculum feasibility threshold
    min_reward_range: float = 1.0  # curriculum gradient-variance threshold
    curriculum: bool = True
    batch_size: int = 8
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    iterations: int = 300
    noise_draws: int = 1
    goal_distance_range: tuple = (1.0, 2.2)
    scenario_pool_size: int = 96

    def validate(self):
        if not (1 <= self.top_k <= self.n_candidates):
            raise ConfigError("need 1 <= top_k <= n_candidates")
        if self.weight_mode not in ("softmax", "linear"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.weight_mode == "softmax" and not self.tau > 0:
            raise ConfigError("softmax weighting requires tau > 0")
        if not (0.0 <= self.goal_agnostic_fraction <= 1.0):
            raise ConfigError("goal_agnostic_fraction must be in [0, 1]")
        if self.batch_size < 1 or self.iterations < 0 or self.noise_draws < 1:
            raise ConfigError("invalid batch_size/iterations/noise_draws")
        if self.scenario_pool_size < self.batch_size:
            raise ConfigError("scenario_pool_size must cover at least one batch")


@dataclass(frozen=True)
class CurriculumStats:
    scenario_id: str
    best_reward: float
    reward_range: float


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    start: Point2
    goal: Point2
    geo: GeodesicField
    goal_agnostic: bool
    id: str
    heading: float = 0.0  # agent frame orientation at the planning state


@dataclass
class CandidateBatch:
    state: Observation
    candidates: list            # world-frame trajectories
    actions: np.ndarray         # (N, 2H) agent-frame normalized actions
    rewards: np.ndarray
    selected: np.ndarray
    weights: np.ndarray


@dataclass
class StepReport:
    loss: float
    mean_reward: float
    gated_fraction: float
    weight_entropy: float
    skipped: bool
    gate_decisions: list


# ---------------------------------------------------------------------------
# Weighting and filtering
# ---------------------------------------------------------------------------

def importance_weights(rewards, tau: float, mode: str = "softmax") -> np.ndarray:
    """Normalize k rewards into nonnegative weights summing to one.

    softmax: exp(r/tau) with max subtraction for stability.  linear: shift
    by -min(r) and normalize by the sum (uniform when all rewards tie).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise ContractViolation("rewards must be a nonempty 1-D vector")
    if not np.isfinite(r).all():
        raise ContractViolation("rewards must be finite")
    if mode == "softmax":
        if not tau > 0:
            raise ContractViolation("softmax temperature must be positive")
        z = r / tau
        z = z - z.max()
        w = np.exp(z)
        return w / w.sum()
    if mode == "linear":
        shifted = r - r.min()
        total = shifted.sum()
        if total == 0.0:
            return np.full(r.size, 1.0 / r.size)
        return shifted / total
    raise ConfigError(f"unknown weight mode {mode!r}")


def select_topk(rewards, k: int) -> np.ndarray:
    """Indices of the k largest rewards, descending, ties by lower index."""
    r = np.asarray(rewards, dtype=np.float64)
    if not (1 <= k <= r.size):
        raise ConfigError(f"need 1 <= k <= {r.size}, got {k}")
    order = np.argsort(-r, kind="stable")
    return order[:k]


def curriculum_gate(stats: CurriculumStats, min_best: float, min_range: float) -> bool:
    """Admit a scenario when it is both feasible and discriminative."""
    return stats.best_reward >= min_best and stats.reward_range >= min_range


def weight_entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# Observations and goal-agnostic sampling
# ---------------------------------------------------------------------------

def make_observation(scene: Scene, pos: Point2, goal: Point2 | None,
                     heading: float = 0.0, n_rays: int = 16,
                     fov: float = math.radians(240.0),
                     max_range: float = 3.0) -> Observation:
    """Egocentric observation at pos; goal=None builds the goal-masked form.

    The ray fan is centred on the agent heading and goal_vec is expressed
    in the heading-aligned agent frame.
    """
    rays = raycast(scene.grid, np.asarray(pos, dtype=np.float64),
                   heading=heading, n_rays=n_rays, fov=fov, max_range=max_range)
    if goal is None:
        return Observation(rays=rays, goal_vec=np.zeros(2), goal_mask=1)
    rel = rotation(-heading) @ (np.asarray(goal, dtype=np.float64) - pos)
    return Observation(rays=rays, goal_vec=rel, goal_mask=0)


def sample_goal_agnostic(rng: np.random.Generator,
                         angle_range=GOAL_AGNOSTIC_ANGLE_RANGE,
                         dist_range=GOAL_AGNOSTIC_DIST_RANGE) -> np.ndarray:
    """Auxiliary goal offset: uniform angle and distance in the given ranges."""
    lo_a, hi_a = angle_range
    lo_d, hi_d = dist_range
    if hi_a < lo_a or hi_d < lo_d or lo_d < 0:
        raise ConfigError("invalid goal-agnostic ranges")
    theta = rng.uniform(lo_a, hi_a)
    d = rng.uniform(lo_d, hi_d)
    return np.array([d * math.cos(theta), d * math.sin(theta)])


def _scaled_ga_dist_range(scene: Scene) -> tuple[float, float]:
    side = max(scene.grid.extent)
    scale = min(1.0, side / GOAL_AGNOSTIC_REFERENCE_SIDE)
    lo, hi = GOAL_AGNOSTIC_DIST_RANGE
    return lo * scale, hi * scale

def _safe_free_point(scene: Scene, rng: np.random.Generator, tries: int = 64) -> Point2:
    safe = np.argwhere(scene.esdf.dist >= scene.robot_radius)
    if len(safe) == 0:
        raise SamplingExhaustedError("no cell clears the robot radius")
    res = scene.grid.resolution
    for _ in range(tries):
        rc = safe[rng.integers(0, len(safe))]
        p = scene.grid.cell_center(*rc) + rng.uniform(-0.3 * res, 0.3 * res, size=2)
        if query_esdf(scene.esdf, p) >= scene.robot_radius:
            return p
    return scene.grid.cell_center(*safe[0])


def sample_goal_agnostic_scenario(scene: Scene, rng: np.random.Generator,
                                  sid: str, tries: int = 64) -> Scenario:
    """Start plus auxiliary goal for a goal-agnostic training scenario.

    The agent heading is drawn uniformly and the auxiliary goal offset is
    sampled in that frame.  The auxiliary goal only steers reward
    evaluation; the observation is goal-masked.  When no draw from the
    angular/distance distribution lands in reachable free space, falls
    back to a uniformly chosen safe cell.
    """
    start = _safe_free_point(scene, rng)
    heading = float(rng.uniform(-math.pi, math.pi))
    frame = rotation(heading)
    dist_range = _scaled_ga_dist_range(scene)
    r = scene.robot_radius
    for _ in range(tries):
        goal = start + frame @ sample_goal_agnostic(rng, dist_range=dist_range)
        if not scene.grid.contains(goal) or query_esdf(scene.esdf, goal) < r:
            continue
        geo = geodesic_field(scene.grid, goal)
        if math.isfinite(geo.at(start)) and geo.at(start) > 0:
            return Scenario(scene, start, goal, geo, True, sid, heading)
    # fallback: any reachable safe cell at least a few radii away
    for _ in range(tries):
        goal = _safe_free_point(scene, rng)
        if np.hypot(*(goal - start)) < 4 * r:
            continue
        geo = geodesic_field(scene.grid, goal)
        if math.isfinite(geo.at(start)) and geo.at(start) > 0:
            return Scenario(scene, start, goal, geo, True, sid, heading)
    raise SamplingExhaustedError(f"no goal-agnostic goal found in {scene.id}")


def build_scenario_pool(scenes, cfg: SidpConfig, seed: int,
                        count: int | None = None) -> list[Scenario]:
    """Fixed collection of training scenarios; a set fraction is goal-agnostic.

    Training shuffles batches out of this pool every pass, so each state is
    revisited many times with fresh on-policy candidates.
    """
    count = cfg.scenario_pool_size if count is None else count
    n_ga = int(round(count * cfg.goal_agnostic_fraction))
    out = []
    for j in range(count):
        rng = substream(seed, "scenario", j)
        last_err = None
        for attempt in range(5):
            scene = scenes[int(rng.integers(0, len(scenes)))]
            sid = f"{scene.id}#{j}"
            try:
                if j < n_ga:
                    out.append(sample_goal_agnostic_scenario(scene, rng, sid))
                else:
                    start, goal = sample_start_goal(scene, rng, cfg.goal_distance_range)
                    geo = geodesic_field(scene.grid, goal)
                    # random heading: mid-route states see goals off-axis, so
                    # training must cover every goal direction, not just "ahead"
                    heading = float(rng.uniform(-math.pi, math.pi))
                    out.append(Scenario(scene, start, goal, geo, False, sid, heading))
                break
            except SamplingExhaustedError as err:
                last_err = err
        else:
            raise last_err
    return out


# ---------------------------------------------------------------------------
# The training step
# ---------------------------------------------------------------------------

def evaluate_candidates(policy: Policy, scenario: Scenario, cfg: SidpConfig,
                        reward_cfg: RewardConfig, rng: np.random.Generator,
                        reward_fn=batch_evaluate) -> CandidateBatch:
    """Phase 1 and 2 for one scenario: sample, score, filter, weight."""
    obs = make_observation(
        scenario.scene, scenario.start,
        None if scenario.goal_agnostic else scenario.goal,
        heading=scenario.heading,
        n_rays=policy.cfg.n_rays, max_range=policy.cfg.max_range)
    raw = sample_ddpm_actions(policy, obs, cfg.n_candidates, rng)
    actions = np.stack([clip_to_disc(row.reshape(-1, 2)).reshape(-1) for row in raw])
    candidates = [action_to_world_trajectory(row, scenario.heading,
                                             policy.cfg.a_max, policy.cfg.horizon)
                  for row in raw]
    breakdowns = reward_fn(scenario.scene, scenario.start, scenario.goal,
                           scenario.geo, candidates, reward_cfg)
    rewards = np.array([b.total if b is not None else -np.inf for b in breakdowns])
    selected = select_topk(rewards, cfg.top_k)
    if scenario.goal_agnostic:
        weights = np.full(cfg.top_k, 1.0 / cfg.top_k)
    else:
        weights = importance_weights(rewards[selected], cfg.tau, cfg.weight_mode)
    return CandidateBatch(state=obs, candidates=candidates, actions=actions,
                          rewards=rewards, selected=selected, weights=weights)


def candidate_stats(sid: str, rewards: np.ndarray) -> CurriculumStats:
    finite = rewards[np.isfinite(rewards)]
    if finite.size == 0:
        return CurriculumStats(sid, -np.inf, 0.0)
    return CurriculumStats(sid, float(finite.max()), float(finite.max() - finite.min()))


def sidp_step(policy: Policy, scenarios, opt_state, cfg: SidpConfig,
              reward_cfg: RewardConfig, step_seed: int,
              reward_fn=batch_evaluate) -> StepReport:
    """One sample-filter-update iteration over a scenario batch.

    All candidates are generated from the parameter snapshot taken at
    entry; the single optimizer update happens after every scenario has
    been sampled and scored.  Returns a skipped report (parameters
    untouched) when the curriculum rejects the whole batch.
    """
    cfg.validate()
    surviving = []
    gate_decisions = []
    reward_sum, reward_n = 0.0, 0
    entropy_sum = 0.0
    for i, scenario in enumerate(scenarios):
        rng_i = substream(step_seed, "candidates", i)
        batch = evaluate_candidates(policy, scenario, cfg, reward_cfg, rng_i,
                                    reward_fn=reward_fn)
        finite = batch.rewards[np.isfinite(batch.rewards)]
        reward_sum += float(finite.sum())
        reward_n += finite.size
        stats = candidate_stats(scenario.id, batch.rewards)
        passed = (curriculum_gate(stats, cfg.min_best_reward, cfg.min_reward_range)
                  if cfg.curriculum else True)
        gate_decisions.append(passed)
        if passed:
            entropy_sum += weight_entropy(batch.weights)
            surviving.append(batch)

    mean_reward = reward_sum / reward_n if reward_n else float("-inf")
    gated_fraction = 1.0 - (len(surviving) / len(scenarios)) if scenarios else 0.0
    if not surviving:
        return StepReport(loss=float("nan"), mean_reward=mean_reward,
                          gated_fraction=gated_fraction, weight_entropy=0.0,
                          skipped=True, gate_decisions=gate_decisions)

    rng_noise = substream(step_seed, "noise")
    xs, ts, obs_rows, eps_rows, w_rows = [], [], [], [], []
    scale = 1.0 / (len(surviving) * cfg.noise_draws)
    for batch in surviving:
        obs_vec = batch.state.vector(policy.cfg.max_range)
        for j, w in zip(batch.selected, batch.weights):
            x0 = batch.actions[int(j)]
            for _ in range(cfg.noise_draws):
                t = int(rng_noise.integers(1, policy.sched.T + 1))
                eps = rng_noise.standard_normal(x0.size)
                xs.append(forward_noise(x0, t, eps, policy.sched))
                ts.append(t)
                obs_rows.append(obs_vec)
                eps_rows.append(eps)
                w_rows.append(w * scale)

    loss, grad = denoiser_grad(policy, np.stack(xs), np.array(ts),
                               np.stack(obs_rows), np.stack(eps_rows),
                               np.array(w_rows))
    adamw_step(policy.params, grad, opt_state)
    return StepReport(loss=loss, mean_reward=mean_reward,
                      gated_fraction=gated_fraction,
                      weight_entropy=entropy_sum / len(surviving),
                      skipped=False, gate_decisions=gate_decisions)


# ---------------------------------------------------------------------------
# Behavior-cloning pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BcConfig:
    pairs_per_scene: int = 30
    distance_range: tuple = (0.8, 2.0)
    batch_size: int = 32
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    max_epochs: int = 400
    patience: int = 40
    val_fraction: float = 0.2


def expert_trajectory(scene: Scene, start: Point2, goal: Point2,
                      a_max: float, horizon: int) -> Trajectory | None:
    """Collision-free demonstration via descent on an inflated geodesic field.

    Walks the 8-connected downhill path of a geodesic field built with two
    cells of margin beyond robot_radius, then string-pulls it into at most
    ``horizon`` chords of length <= a_max.  Chords are verified at one cell
    of margin so demonstrations keep comfortable clearance instead of
    grazing the contact threshold (grazing experts teach the policy to
    ride the clearance envelope, where execution stalls).  Returns None
    when no such corridor exists for this pair.
    """
    r = scene.robot_radius
    margin = scene.grid.resolution
    grid = inflated_grid(scene.grid, scene.esdf, r + 2 * margin)
    try:
        geo = geodesic_field(grid, goal)
    except Exception:
        return None
    if not math.isfinite(geo.at(start)):
        return None

    # Downhill cell walk from the start cell to the goal cell.
    row, col = grid.cell_of(start)
    if grid.cells[row, col]:
        return None
    vertices = [np.asarray(start, dtype=np.float64)]
    h, w = grid.cells.shape
    current = geo.dist[row, col]
    for _ in range(4 * h * w):
        if current <= 0.0:
            break
        best = None
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                rr, cc = row + dr, col + dc
                if 0 <= rr < h and 0 <= cc < w and geo.dist[rr, cc] < current:
                    if best is None or geo.dist[rr, cc] < geo.dist[best]:
                        best = (rr, cc)
        if best is None:
            break
        row, col = best
        current = geo.dist[row, col]
        vertices.append(grid.cell_center(row, col))
    vertices.append(np.asarray(goal, dtype=np.float64))

    # String-pull: each step jumps to the farthest vertex reachable by a
    # safe straight chord no longer than a_max.
    step_cap = 0.98 * a_max
    deltas = np.zeros((horizon, 2))
    pos = np.asarray(start, dtype=np.float64)
    idx = 0
    for i in range(horizon):
        target = None
        for j in range(len(vertices) - 1, idx, -1):
            v = vertices[j]
            if np.hypot(*(v - pos)) > step_cap:
                continue
            if not collision_check(scene.esdf, [pos, v], r).hit:
                target = j
                break
        if target is None:
            # no full vertex within reach: move toward the next one
            j = min(idx + 1, len(vertices) - 1)
            direction = vertices[j] - pos
            dist = np.hypot(*direction)
            if dist < 1e-12:
                break
            v = pos + direction * min(1.0, step_cap / dist)
            if collision_check(scene.esdf, [pos, v], r).hit:
                break
            deltas[i] = v - pos
            pos = v
        else:
            deltas[i] = vertices[target] - pos
            pos = vertices[target]
            idx = target
            if target == len(vertices) - 1:
                break
    traj = trajectory_from_deltas(deltas, a_max)
    chain = np.vstack([np.asarray(start)[None, :], traj.waypoints(np.asarray(start))])
    if collision_check(scene.esdf, chain, r).hit:
        return None
    return traj


def build_bc_dataset(policy: Policy, scenes, rng: np.random.Generator,
                     cfg: BcConfig) -> tuple[np.ndarray, np.ndarray]:
    """(observation matrix, normalized expert actions) over all scenes."""
    obs_rows, act_rows = [], []
    for scene in scenes:
        made = 0
        attempts = 0
        while made < cfg.pairs_per_scene and attempts < 8 * cfg.pairs_per_scene:
            attempts += 1
            try:
                start, goal = sample_start_goal(scene, rng, cfg.distance_range)
            except SamplingExhaustedError:
                break
            traj = expert_trajectory(scene, start, goal,
                                     policy.cfg.a_max, policy.cfg.horizon)
            if traj is None:
                continue
            heading = float(rng.uniform(-math.pi, math.pi))
            obs = make_observation(scene, start, goal, heading=heading,
                                   n_rays=policy.cfg.n_rays,
                                   max_range=policy.cfg.max_range)
            obs_rows.append(obs.vector(policy.cfg.max_range))
            act_rows.append(world_deltas_to_action(traj.deltas, heading,
                                                   policy.cfg.a_max))
            made += 1
    if not obs_rows:
        raise SamplingExhaustedError("no expert demonstrations could be built")
    return np.stack(obs_rows), np.stack(act_rows)


def bc_pretrain(policy: Policy, scenes, seed: int,
                cfg: BcConfig = BcConfig()) -> list[dict]:
    """Uniform-weight denoising training on geodesic-expert demonstrations.

    Trains until the validation loss stops improving (patience epochs) or
    max_epochs; restores the best-validation parameters.  Returns the
    per-epoch log.
    """
    rng = substream(seed, "bc-data")
    obs, acts = build_bc_dataset(policy, scenes, rng, cfg)
    n = len(obs)
    order = substream(seed, "bc-split").permutation(n)
    n_val = max(1, int(cfg.val_fraction * n))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx

    # fixed validation noise for a deterministic plateau signal
    val_rng = substream(seed, "bc-val")
    val_t = val_rng.integers(1, policy.sched.T + 1, size=len(val_idx))
    val_eps = val_rng.standard_normal((len(val_idx), policy.cfg.action_dim))

    def val_loss():
        x0 = acts[val_idx]
        ab = policy.sched.alpha_bar[val_t - 1][:, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * val_eps
        loss, _ = denoiser_grad(policy, xt, val_t, obs[val_idx], val_eps,
                                np.full(len(val_idx), 1.0 / len(val_idx)))
        return loss

    opt = new_adamw_state(policy.params.n_params(), cfg.learning_rate,
                          cfg.weight_decay)
    train_rng = substream(seed, "bc-train")
    log = [{"epoch": -1, "train_loss": float("nan"), "val_loss": val_loss()}]
    best = (log[0]["val_loss"], policy.params.flat())
    stale = 0
    for epoch in range(cfg.max_epochs):
        perm = train_rng.permutation(len(train_idx))
        epoch_loss, batches = 0.0, 0
        for k in range(0, len(perm), cfg.batch_size):
            idx = train_idx[perm[k:k + cfg.batch_size]]
            x0 = acts[idx]
            t = train_rng.integers(1, policy.sched.T + 1, size=len(idx))
            eps = train_rng.standard_normal((len(idx), policy.cfg.action_dim))
            ab = policy.sched.alpha_bar[t - 1][:, None]
            xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
            loss, grad = denoiser_grad(policy, xt, t, obs[idx], eps,
                                       np.full(len(idx), 1.0 / len(idx)))
            adamw_step(policy.params, grad, opt)
            epoch_loss += loss
            batches += 1
        vl = val_loss()
        log.append({"epoch": epoch, "train_loss": epoch_loss / max(batches, 1),
                    "val_loss": vl})
        if vl < best[0]:
            best = (vl, policy.params.flat())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    policy.params.set_flat(best[1])
    return log


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def train(policy: Policy, scene_pool, cfg: SidpConfig,
          reward_cfg: RewardConfig, seed: int, callbacks=()) -> list[dict]:
    """Iterate sidp_step over shuffled batches from a fixed scenario pool.

    Returns one log row per iteration: iteration, loss, mean_reward,
    gated_fraction, weight_entropy, wall_ms.  Wall time is the only
    nondeterministic column.
    """
    cfg.validate()
    if cfg.iterations == 0:
        return []
    scenarios = build_scenario_pool(scene_pool, cfg, seed)
    opt_state = new_adamw_state(policy.params.n_params(), cfg.learning_rate,
                                cfg.weight_decay)
    rows = []
    order = []
    epoch = 0
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        if len(order) < cfg.batch_size:
            order = list(substream(seed, "order", epoch).permutation(len(scenarios)))
            epoch += 1
        batch = [scenarios[order.pop()] for _ in range(cfg.batch_size)]
        report = sidp_step(policy, batch, opt_state, cfg, reward_cfg,
                           step_seed=spawn_seed(seed, "step", it))
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append({
            "iteration": it,
            "loss": report.loss,
            "mean_reward": report.mean_reward,
            "gated_fraction": report.gated_fraction,
            "weight_entropy": report.weight_entropy,
            "wall_ms": wall_ms,
        })
        for cb in callbacks:
            cb(it, report, policy)
    return rows
