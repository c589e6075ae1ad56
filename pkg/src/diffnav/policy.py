"""Diffusion trajectory policy: schedule, denoiser network, samplers, optimizer.

The policy denoises a flattened action vector of 2*H components,
conditioned on a sinusoidal embedding of the diffusion timestep and the
observation vector.  The denoiser is a two-hidden-layer tanh MLP in
float64, with hand-written reverse-mode gradients so the whole training
path is checkable against finite differences.

Action normalization: trajectories are stored canonically in action units
(components in [-1, 1]); meters are derived by scaling with a_max.  This
makes the denormalize(normalize(t)) round trip exact by construction,
which a divide-then-multiply on raw meter values is not.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class PolicyConfig:
    horizon: int = 8
    a_max: float = 0.3
    n_rays: int = 16
    max_range: float = 3.0
    hidden_width: int = 128
    time_dim: int = 32
    diffusion_steps: int = 10
    schedule: str = "squared_cosine"

    @property
    def action_dim(self) -> int:
        return 2 * self.horizon

    @property
    def obs_dim(self) -> int:
        return self.n_rays + 3

    @property
    def input_dim(self) -> int:
        return self.action_dim + self.time_dim + self.obs_dim

    def validate(self):
        if self.horizon < 1 or self.a_max <= 0:
            raise ConfigError("horizon must be >= 1 and a_max positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time_dim must be an even integer >= 2")
        if self.n_rays < 1 or self.max_range <= 0 or self.hidden_width < 1:
            raise ConfigError("invalid observation/network dimensions")


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

# Endpoints of the cos^2 argument, chosen so that alpha_bar_1 > 0.99 and
# alpha_bar_T < 0.05 hold for every T in [2, 1000].
_COS_U_FIRST = 0.05
_COS_U_LAST = 0.92

_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.5


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray | float:
        """alpha_bar for 1-based timestep t (t = 0 maps to 1.0)."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)


def make_schedule(T: int, kind: str = "squared_cosine") -> DiffusionSchedule:
    """Build a noise schedule of T steps.

    ``squared_cosine`` follows a cos^2 decay of alpha_bar; ``linear``
    spaces beta from 1e-4 to 0.5, raising the endpoint when T is too small
    for the terminal alpha_bar to fall below 0.05.
    """
    if not (2 <= T <= 1000):
        raise ConfigError(f"diffusion steps must be in [2, 1000], got {T}")
    if kind == "squared_cosine":
        u = np.linspace(_COS_U_FIRST, _COS_U_LAST, T)
        abar = np.cos(0.5 * math.pi * u) ** 2
        prev = np.concatenate([[1.0], abar[:-1]])
        beta = 1.0 - abar / prev
    elif kind == "linear":
        end = _LINEAR_BETA_END

        def terminal(b_end):
            return np.prod(1.0 - np.linspace(_LINEAR_BETA_START, b_end, T))

        if terminal(end) >= 0.05:
            lo, hi = end, 1.0 - 1e-9
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if terminal(mid) > 0.045:
                    lo = mid
                else:
                    hi = mid
            end = hi
        beta = np.linspace(_LINEAR_BETA_START, end, T)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")

    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    _check_schedule(sched)
    return sched


def _check_schedule(s: DiffusionSchedule):
    if not ((s.beta > 0) & (s.beta < 1)).all():
        raise ConfigError("schedule betas must lie in (0, 1)")
    if not (np.diff(s.alpha_bar) < 0).all():
        raise ConfigError("alpha_bar must be strictly decreasing")
    if not (s.alpha_bar[0] > 0.99 and s.alpha_bar[-1] < 0.05):
        raise ConfigError("schedule endpoints out of contract")


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """Egocentric numeric state: raycasts, relative goal, goal-agnostic flag."""

    rays: np.ndarray      # (R,) meters, clamped to [0, max_range]
    goal_vec: np.ndarray  # (2,) meters, relative goal; zeroed when masked
    goal_mask: int = 0    # 1 = goal-agnostic

    def __post_init__(self):
        if self.goal_mask not in (0, 1):
            raise ContractViolation("goal_mask must be 0 or 1")
        if self.goal_mask == 1 and np.any(self.goal_vec != 0.0):
            raise ContractViolation("goal-agnostic observations must zero goal_vec")

    def vector(self, max_range: float) -> np.ndarray:
        """Scaled conditioning vector of length R + 3."""
        return np.concatenate([
            self.rays / max_range,
            self.goal_vec / max_range,
            [float(self.goal_mask)],
        ])


# ---------------------------------------------------------------------------
# Trajectories and normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """H relative waypoint displacements, stored in action units.

    Each row of ``norm`` lies in the unit disc, so every meter delta has
    Euclidean length at most a_max (and a fortiori each component is
    within [-a_max, a_max]).  The disc bound, unlike a componentwise box,
    survives rotation between the agent frame and the world frame.
    """

    norm: np.ndarray  # (H, 2)
    a_max: float

    @property
    def deltas(self) -> np.ndarray:
        """(H, 2) displacements in meters."""
        return self.norm * self.a_max

    def waypoints(self, start: np.ndarray) -> np.ndarray:
        """(H, 2) absolute waypoints: start + cumulative sum of deltas."""
        return np.asarray(start, dtype=np.float64)[None, :] + np.cumsum(self.deltas, axis=0)

    def length(self) -> float:
        return float(np.hypot(self.deltas[:, 0], self.deltas[:, 1]).sum())


def clip_to_disc(x: np.ndarray) -> np.ndarray:
    """Scale any (H, 2) rows of norm > 1 back onto the unit disc.

    The small tolerance makes the operation idempotent despite rounding
    (a rescaled row can land an ulp above 1), which keeps the
    normalize/de-normalize round trip exact.
    """
    norms = np.hypot(x[:, 0], x[:, 1])
    scale = np.where(norms > 1.0 + 1e-12, 1.0 / np.maximum(norms, 1e-300), 1.0)
    return x * scale[:, None]


def trajectory_from_deltas(deltas_m: np.ndarray, a_max: float) -> Trajectory:
    deltas_m = np.asarray(deltas_m, dtype=np.float64)
    if deltas_m.ndim != 2 or deltas_m.shape[1] != 2:
        raise ContractViolation(f"deltas must be (H, 2), got {deltas_m.shape}")
    if not np.isfinite(deltas_m).all():
        raise ContractViolation("deltas must be finite")
    return Trajectory(norm=clip_to_disc(deltas_m / a_max), a_max=a_max)


def trajectory_from_action(x: np.ndarray, a_max: float, horizon: int) -> Trajectory:
    """De-normalize a flat action vector, clamping into bounds."""
    x = np.asarray(x, dtype=np.float64).reshape(horizon, 2)
    return Trajectory(norm=clip_to_disc(x), a_max=a_max)


def action_of(traj: Trajectory) -> np.ndarray:
    """Flat normalized action vector (2H,) of a trajectory."""
    return traj.norm.reshape(-1).copy()


def rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def action_to_world_trajectory(x: np.ndarray, heading: float, a_max: float,
                               horizon: int) -> Trajectory:
    """Rotate a flat agent-frame action into a world-frame trajectory.

    The rotation preserves per-waypoint lengths, so the disc clamp applied
    in the agent frame keeps the world deltas within bounds too.
    """
    rows = clip_to_disc(np.asarray(x, dtype=np.float64).reshape(horizon, 2))
    return Trajectory(norm=rows @ rotation(heading).T, a_max=a_max)


def world_deltas_to_action(deltas_m: np.ndarray, heading: float, a_max: float) -> np.ndarray:
    """Express world-frame meter deltas as a flat agent-frame action."""
    rows = np.asarray(deltas_m, dtype=np.float64) @ rotation(-heading).T
    return clip_to_disc(rows / a_max).reshape(-1)


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------

@dataclass
class DenoiserParams:
    """Weights and biases of the three linear layers, in float64.

    Layout order for the flat vector: W0, b0, W1, b1, W2, b2 (C order).
    """

    weights: list
    biases: list

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray):
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = theta[k:k + b.size].reshape(b.shape).copy()
            k += b.size
        if k != len(theta):
            raise ContractViolation("flat parameter vector length mismatch")

    def shapes(self):
        return [list(w.shape) for w in self.weights]


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> DenoiserParams:
    """Xavier-uniform hidden layers; zero-initialized output layer."""
    dims = [cfg.input_dim, cfg.hidden_width, cfg.hidden_width, cfg.action_dim]
    weights, biases = [], []
    for i in range(3):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == 2:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return DenoiserParams(weights=weights, biases=biases)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class Policy:
    """Bundle of config, schedule and parameters; the unit of checkpointing."""

    cfg: PolicyConfig
    sched: DiffusionSchedule
    params: DenoiserParams


def new_policy(cfg: PolicyConfig = PolicyConfig(), seed: int = 0) -> Policy:
    cfg.validate()
    rng = np.random.default_rng(seed)
    return Policy(cfg=cfg, sched=make_schedule(cfg.diffusion_steps, cfg.schedule),
                  params=init_params(cfg, rng))


def _as_obs_matrix(policy: Policy, obs, batch: int) -> np.ndarray:
    if isinstance(obs, Observation):
        vec = obs.vector(policy.cfg.max_range)
        return np.broadcast_to(vec, (batch, vec.size))
    mat = np.asarray(obs, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    return np.broadcast_to(mat, (batch, mat.shape[1]))


def _net_input(policy: Policy, x: np.ndarray, t: np.ndarray, obs_mat: np.ndarray) -> np.ndarray:
    emb = time_embedding(t, policy.cfg.time_dim)
    return np.concatenate([x, emb, obs_mat], axis=1)


def _forward_cached(params: DenoiserParams, inp: np.ndarray):
    h1 = np.tanh(inp @ params.weights[0] + params.biases[0])
    h2 = np.tanh(h1 @ params.weights[1] + params.biases[1])
    out = h2 @ params.weights[2] + params.biases[2]
    return out, (inp, h1, h2)


def denoiser_forward(policy: Policy, x_t: np.ndarray, t, obs) -> np.ndarray:
    """Predicted noise for noisy actions x_t at timesteps t.

    x_t may be (2H,) or (B, 2H); t scalar or (B,); obs an Observation or a
    pre-scaled (B, R+3) matrix.  Output shape follows x_t.
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != policy.cfg.action_dim:
        raise ContractViolation(
            f"action dim {x.shape[1]} != {policy.cfg.action_dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    obs_mat = _as_obs_matrix(policy, obs, x.shape[0])
    if obs_mat.shape[1] != policy.cfg.obs_dim:
        raise ContractViolation(
            f"obs dim {obs_mat.shape[1]} != {policy.cfg.obs_dim}")
    out, _ = _forward_cached(policy.params, _net_input(policy, x, t, obs_mat))
    return out[0] if single else out


def denoiser_grad(
    policy: Policy,
    x_t: np.ndarray,
    t: np.ndarray,
    obs_mat: np.ndarray,
    eps: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted denoising loss and its exact gradient (flat vector).

    Loss = sum_b w_b * ||eps_b - eps_hat_b||^2.  Weights must be
    nonnegative; they are not renormalized here.
    """
    x = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    obs_mat = np.asarray(obs_mat, dtype=np.float64)
    p = policy.params

    inp = _net_input(policy, x, t, obs_mat)
    out, (inp, h1, h2) = _forward_cached(p, inp)
    resid = out - eps
    loss = float(np.sum(w * np.sum(resid * resid, axis=1)))

    d_out = 2.0 * w[:, None] * resid
    g_w2 = h2.T @ d_out
    g_b2 = d_out.sum(axis=0)
    d_h2 = (d_out @ p.weights[2].T) * (1.0 - h2 * h2)
    g_w1 = h1.T @ d_h2
    g_b1 = d_h2.sum(axis=0)
    d_h1 = (d_h2 @ p.weights[1].T) * (1.0 - h1 * h1)
    g_w0 = inp.T @ d_h1
    g_b0 = d_h1.sum(axis=0)

    grad = np.concatenate([
        g_w0.reshape(-1), g_b0, g_w1.reshape(-1), g_b1, g_w2.reshape(-1), g_b2,
    ])
    return loss, grad


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def new_adamw_state(n_params: int, lr: float, weight_decay: float = 0.0) -> AdamWState:
    return AdamWState(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr,
                      weight_decay=weight_decay)


def adamw_step(params: DenoiserParams, grad: np.ndarray, state: AdamWState) -> DenoiserParams:
    """One decoupled-weight-decay adaptive-moment update, in place."""
    theta = params.flat()
    if grad.shape != theta.shape:
        raise ContractViolation("gradient shape does not match parameters")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    theta = theta * (1.0 - state.lr * state.weight_decay)
    theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.set_flat(theta)
    return params


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

@dataclass
class CallCounter:
    """Counts denoiser forward invocations (a batched forward counts once)."""

    calls: int = 0


def sample_ddpm_actions(
    policy: Policy,
    obs,
    n: int,
    rng: np.random.Generator,
    counter: CallCounter | None = None,
) -> np.ndarray:
    """Ancestral DDPM sampling of n raw action vectors for one observation.

    Runs the full schedule (T denoiser calls), injecting posterior noise at
    every step except the last.  Rows are in normalized agent-frame units
    and not yet clamped.
    """
    cfg, sched = policy.cfg, policy.sched
    obs_mat = _as_obs_matrix(policy, obs, n)
    x = rng.standard_normal((n, cfg.action_dim))
    for t in range(sched.T, 0, -1):
        out, _ = _forward_cached(
            policy.params,
            _net_input(policy, x, np.full(n, t, dtype=np.int64), obs_mat),
        )
        if counter is not None:
            counter.calls += 1
        beta = sched.beta[t - 1]
        ab_t = sched.alpha_bar[t - 1]
        mean = (x - (beta / math.sqrt(1.0 - ab_t)) * out) / math.sqrt(sched.alpha[t - 1])
        if t > 1:
            ab_prev = sched.alpha_bar[t - 2]
            sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))
            x = mean + sigma * rng.standard_normal((n, cfg.action_dim))
        else:
            x = mean
    return x


def sample_ddpm_batch(
    policy: Policy,
    obs,
    n: int,
    rng: np.random.Generator,
    counter: CallCounter | None = None,
) -> list[Trajectory]:
    """DDPM sampling de-normalized into trajectories (agent frame = world)."""
    x = sample_ddpm_actions(policy, obs, n, rng, counter)
    return [trajectory_from_action(row, policy.cfg.a_max, policy.cfg.horizon)
            for row in x]


def sample_ddpm(
    policy: Policy,
    obs,
    rng: np.random.Generator,
    steps: int | None = None,
    counter: CallCounter | None = None,
) -> Trajectory:
    """Single-trajectory DDPM sample; steps must equal the schedule length."""
    if steps is not None and steps != policy.sched.T:
        raise ConfigError("DDPM always runs the full schedule (steps = T)")
    return sample_ddpm_batch(policy, obs, 1, rng, counter)[0]


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided descending sub-sequence of [1, T] of length steps."""
    if not (1 <= steps <= T):
        raise ConfigError(f"DDIM steps must be in [1, T]={T}, got {steps}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    taus = np.rint(np.linspace(T, 1, steps)).astype(np.int64)
    return taus


def sample_ddim_action(
    policy: Policy,
    obs,
    steps: int,
    init_noise: np.ndarray,
    counter: CallCounter | None = None,
) -> np.ndarray:
    """Deterministic DDIM sampling of one raw action vector.

    A pure function of (params, obs, init_noise, steps); exactly ``steps``
    denoiser calls.
    """
    cfg, sched = policy.cfg, policy.sched
    taus = ddim_timesteps(sched.T, steps)
    obs_mat = _as_obs_matrix(policy, obs, 1)
    x = np.asarray(init_noise, dtype=np.float64).reshape(1, cfg.action_dim).copy()
    for i, tau in enumerate(taus):
        out, _ = _forward_cached(
            policy.params,
            _net_input(policy, x, np.array([tau], dtype=np.int64), obs_mat),
        )
        if counter is not None:
            counter.calls += 1
        ab_t = sched.alpha_bar[tau - 1]
        ab_prev = sched.alpha_bar[taus[i + 1] - 1] if i + 1 < len(taus) else 1.0
        x0 = (x - math.sqrt(1.0 - ab_t) * out) / math.sqrt(ab_t)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * out
    return x[0]


def sample_ddim(
    policy: Policy,
    obs,
    steps: int,
    init_noise: np.ndarray,
    counter: CallCounter | None = None,
) -> Trajectory:
    """DDIM sampling de-normalized into a trajectory (agent frame = world)."""
    x = sample_ddim_action(policy, obs, steps, init_noise, counter)
    return trajectory_from_action(x, policy.cfg.a_max, policy.cfg.horizon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _b64_f64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _from_b64_f64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def save_checkpoint(path, policy: Policy, opt_state: AdamWState | None = None, meta: dict | None = None):
    """Write a bit-exact round-trippable checkpoint (JSON with base64 float64)."""
    data = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(policy.cfg),
        "shapes": policy.params.shapes(),
        "params": _b64_f64(policy.params.flat()),
        "optimizer": None,
        "meta": meta or {},
    }
    if opt_state is not None:
        data["optimizer"] = {
            "m": _b64_f64(opt_state.m),
            "v": _b64_f64(opt_state.v),
            "step": opt_state.step,
            "lr": opt_state.lr,
            "weight_decay": opt_state.weight_decay,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
        }
    with open(path, "w") as fh:
        json.dump(data, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[Policy, AdamWState | None]:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {data.get('version')}")
    cfg = PolicyConfig(**data["config"])
    policy = new_policy(cfg, seed=0)
    policy.params.set_flat(_from_b64_f64(data["params"]))
    opt = None
    if data["optimizer"] is not None:
        o = data["optimizer"]
        opt = AdamWState(
            m=_from_b64_f64(o["m"]), v=_from_b64_f64(o["v"]), step=int(o["step"]),
            lr=float(o["lr"]), weight_decay=float(o["weight_decay"]),
            beta1=float(o["beta1"]), beta2=float(o["beta2"]), eps=float(o["eps"]),
        )
    return policy, opt
