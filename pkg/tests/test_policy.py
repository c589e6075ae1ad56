import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffnav.errors import ConfigError
from diffnav.policy import (
    AdamWState,
    CallCounter,
    Observation,
    Policy,
    PolicyConfig,
    action_of,
    adamw_step,
    ddim_timesteps,
    denoiser_forward,
    denoiser_grad,
    forward_noise,
    init_params,
    load_checkpoint,
    make_schedule,
    new_adamw_state,
    new_policy,
    sample_ddim,
    sample_ddpm,
    sample_ddpm_batch,
    save_checkpoint,
    time_embedding,
    trajectory_from_action,
    trajectory_from_deltas,
)

SMALL_CFG = PolicyConfig(horizon=2, n_rays=4, hidden_width=10, time_dim=8,
                         diffusion_steps=10)


def small_policy(seed=0):
    return new_policy(SMALL_CFG, seed=seed)


def random_obs_matrix(rng, n, cfg):
    return rng.uniform(-1.0, 1.0, size=(n, cfg.obs_dim))


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_squared_cosine_schedule_invariants():
    s = make_schedule(10, "squared_cosine")
    assert len(s.alpha_bar) == 10
    assert (np.diff(s.alpha_bar) < 0).all()
    assert s.alpha_bar[0] > 0.99
    assert s.alpha_bar[-1] < 0.05
    assert ((s.beta > 0) & (s.beta < 1)).all()


def test_linear_schedule_alpha_bar_is_product():
    s = make_schedule(10, "linear")
    np.testing.assert_array_equal(s.alpha_bar, np.cumprod(1.0 - s.beta))
    # T=10 keeps the default endpoints
    assert s.beta[0] == pytest.approx(1e-4)
    assert s.beta[-1] == pytest.approx(0.5)


def test_schedule_rejects_t_out_of_range():
    with pytest.raises(ConfigError):
        make_schedule(1)
    with pytest.raises(ConfigError):
        make_schedule(1001)
    with pytest.raises(ConfigError):
        make_schedule(10, "cubic")


@pytest.mark.parametrize("T", [2, 3, 10, 50, 1000])
@pytest.mark.parametrize("kind", ["linear", "squared_cosine"])
def test_schedule_contract_across_sizes(T, kind):
    s = make_schedule(T, kind)
    assert s.alpha_bar[0] > 0.99
    assert s.alpha_bar[-1] < 0.05
    assert (np.diff(s.alpha_bar) < 0).all()


# ---------------------------------------------------------------------------
# Forward noising
# ---------------------------------------------------------------------------

def test_forward_noise_zero_eps():
    s = make_schedule(10)
    x0 = np.linspace(-1, 1, 16)
    xt = forward_noise(x0, 5, np.zeros(16), s)
    np.testing.assert_allclose(xt, math.sqrt(s.alpha_bar[4]) * x0)


def test_forward_noise_near_identity_at_t1():
    s = make_schedule(10)
    x0 = np.full(16, 0.5)
    xt = forward_noise(x0, 1, np.ones(16), s)
    assert np.abs(xt - x0).max() < 0.15  # alpha_bar_1 > 0.99


@pytest.mark.parametrize("t", [1, 5, 10])
def test_forward_noise_monte_carlo_statistics(t):
    s = make_schedule(10)
    rng = np.random.default_rng(123)
    x0 = rng.uniform(-1, 1, size=16)
    n = 10_000
    eps = rng.standard_normal((n, 16))
    xt = math.sqrt(s.alpha_bar[t - 1]) * x0[None, :] + math.sqrt(1 - s.alpha_bar[t - 1]) * eps
    target_mean = math.sqrt(s.alpha_bar[t - 1]) * x0
    sigma_mean = math.sqrt((1 - s.alpha_bar[t - 1]) / n)
    assert (np.abs(xt.mean(axis=0) - target_mean) <= 3 * sigma_mean + 1e-12).all()
    var = xt.var(axis=0).mean()
    assert abs(var - (1 - s.alpha_bar[t - 1])) <= 0.05 * (1 - s.alpha_bar[t - 1])


# ---------------------------------------------------------------------------
# Denoiser forward
# ---------------------------------------------------------------------------

def test_zero_final_layer_outputs_zero():
    policy = small_policy()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, SMALL_CFG.action_dim))
    obs = random_obs_matrix(rng, 6, SMALL_CFG)
    out = denoiser_forward(policy, x, np.arange(1, 7), obs)
    np.testing.assert_array_equal(out, np.zeros_like(x))


def test_denoiser_deterministic():
    policy = small_policy(seed=3)
    policy.params.weights[2] = np.random.default_rng(9).standard_normal(
        policy.params.weights[2].shape)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(SMALL_CFG.action_dim)
    obs = Observation(rays=np.full(4, 1.5), goal_vec=np.array([0.5, -0.5]))
    a = denoiser_forward(policy, x, 3, obs)
    b = denoiser_forward(policy, x, 3, obs)
    np.testing.assert_array_equal(a, b)


def test_denoiser_output_bounded_by_layer_norms():
    rng = np.random.default_rng(7)
    policy = small_policy(seed=7)
    for w in policy.params.weights:
        w[...] = rng.standard_normal(w.shape)
    # tanh outputs lie in [-1, 1], so |out_j| <= sum_i |W2[i,j]| + |b2_j|
    bound = np.abs(policy.params.weights[2]).sum(axis=0) + np.abs(policy.params.biases[2])
    for _ in range(10):
        x = rng.uniform(-5, 5, size=SMALL_CFG.action_dim)
        obs = random_obs_matrix(rng, 1, SMALL_CFG)
        out = denoiser_forward(policy, x[None, :], 4, obs)[0]
        assert (np.abs(out) <= bound + 1e-12).all()


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _random_batch(policy, rng, batch=5):
    cfg = policy.cfg
    x = rng.standard_normal((batch, cfg.action_dim))
    t = rng.integers(1, policy.sched.T + 1, size=batch)
    obs = random_obs_matrix(rng, batch, cfg)
    eps = rng.standard_normal((batch, cfg.action_dim))
    return x, t, obs, eps


def test_grad_zero_weights():
    policy = small_policy(seed=2)
    rng = np.random.default_rng(2)
    x, t, obs, eps = _random_batch(policy, rng)
    loss, grad = denoiser_grad(policy, x, t, obs, eps, np.zeros(5))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros_like(grad))


def test_grad_uniform_weights_is_mean_squared_error():
    policy = small_policy(seed=4)
    rng = np.random.default_rng(4)
    for w in policy.params.weights:
        w[...] = 0.1 * rng.standard_normal(w.shape)
    x, t, obs, eps = _random_batch(policy, rng, batch=8)
    loss, _ = denoiser_grad(policy, x, t, obs, eps, np.full(8, 1.0 / 8.0))
    pred = denoiser_forward(policy, x, t, obs)
    per_sample = ((pred - eps) ** 2).sum(axis=1)
    assert loss == pytest.approx(per_sample.mean(), abs=1e-12)


def test_grad_matches_finite_differences():
    h = 1e-4
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        policy = small_policy(seed=trial)
        assert policy.params.n_params() <= 500
        theta0 = policy.params.flat()
        theta0[:] = 0.3 * rng.standard_normal(theta0.size)
        policy.params.set_flat(theta0)
        x, t, obs, eps = _random_batch(policy, rng, batch=4)
        w = rng.uniform(0.1, 1.0, size=4)
        _, grad = denoiser_grad(policy, x, t, obs, eps, w)

        fd = np.empty_like(grad)
        for i in range(theta0.size):
            for sign, store in ((+1, 0), (-1, 1)):
                theta = theta0.copy()
                theta[i] += sign * h
                policy.params.set_flat(theta)
                l, _ = denoiser_grad(policy, x, t, obs, eps, w)
                if sign > 0:
                    l_plus = l
                else:
                    l_minus = l
            fd[i] = (l_plus - l_minus) / (2 * h)
        policy.params.set_flat(theta0)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4, f"trial {trial}: rel error {rel}"


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    policy = small_policy(seed=5)
    theta0 = policy.params.flat()
    state = new_adamw_state(theta0.size, lr=0.1, weight_decay=0.0)
    adamw_step(policy.params, np.zeros_like(theta0), state)
    np.testing.assert_array_equal(policy.params.flat(), theta0)
    assert state.step == 1


def test_adamw_single_step_decreases_scalar():
    params = _ScalarParams(1.0)
    state = new_adamw_state(1, lr=0.1, weight_decay=0.0)
    adamw_step(params, np.array([1.0]), state)
    assert params.flat()[0] < 1.0


def test_adamw_converges_on_quadratic_bowl():
    params = _ScalarParams(1.0)
    state = new_adamw_state(1, lr=0.05, weight_decay=0.0)
    for _ in range(200):
        p = params.flat()[0]
        adamw_step(params, np.array([2.0 * p]), state)
    assert abs(params.flat()[0]) < 0.01


class _ScalarParams:
    """Minimal DenoiserParams stand-in: one weight, no biases."""

    def __init__(self, value):
        self._theta = np.array([float(value)])

    def flat(self):
        return self._theta.copy()

    def set_flat(self, theta):
        self._theta = np.asarray(theta, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def _free_obs():
    return Observation(rays=np.full(4, 3.0), goal_vec=np.array([1.0, 0.0]))


def test_ddpm_reproducible_and_counts_calls():
    policy = small_policy(seed=0)  # zero denoiser
    counter = CallCounter()
    t1 = sample_ddpm(policy, _free_obs(), np.random.default_rng(11), counter=counter)
    t2 = sample_ddpm(policy, _free_obs(), np.random.default_rng(11))
    np.testing.assert_array_equal(t1.norm, t2.norm)
    assert counter.calls == policy.sched.T


def test_ddpm_different_seeds_differ():
    policy = small_policy(seed=0)
    t1 = sample_ddpm(policy, _free_obs(), np.random.default_rng(1))
    t2 = sample_ddpm(policy, _free_obs(), np.random.default_rng(2))
    assert not np.array_equal(t1.norm, t2.norm)


def test_ddpm_rejects_partial_schedule():
    policy = small_policy()
    with pytest.raises(ConfigError):
        sample_ddpm(policy, _free_obs(), np.random.default_rng(0), steps=5)


def test_ddim_deterministic_given_init_noise():
    policy = small_policy(seed=6)
    noise = np.random.default_rng(3).standard_normal(SMALL_CFG.action_dim)
    a = sample_ddim(policy, _free_obs(), 5, noise)
    b = sample_ddim(policy, _free_obs(), 5, noise)
    np.testing.assert_array_equal(a.norm, b.norm)


@pytest.mark.parametrize("steps", [10, 5, 3, 1])
def test_ddim_call_count_equals_steps(steps):
    policy = small_policy(seed=6)
    counter = CallCounter()
    noise = np.random.default_rng(4).standard_normal(SMALL_CFG.action_dim)
    sample_ddim(policy, _free_obs(), steps, noise, counter=counter)
    assert counter.calls == steps


def test_ddim_rejects_steps_above_t():
    policy = small_policy()
    with pytest.raises(ConfigError):
        sample_ddim(policy, _free_obs(), 11, np.zeros(SMALL_CFG.action_dim))


def test_ddim_timestep_subsequences():
    np.testing.assert_array_equal(ddim_timesteps(10, 10), np.arange(10, 0, -1))
    assert ddim_timesteps(10, 1).tolist() == [10]
    taus = ddim_timesteps(10, 5)
    assert taus[0] == 10 and taus[-1] == 1
    assert (np.diff(taus) < 0).all()


def _train_toy_denoiser(policy, iters=600, lr=5e-3):
    """Teach the denoiser a single-mode action distribution."""
    rng = np.random.default_rng(99)
    x0 = np.tile(np.array([0.4, -0.2]), policy.cfg.horizon)
    obs = _free_obs().vector(policy.cfg.max_range)[None, :].repeat(16, axis=0)
    state = new_adamw_state(policy.params.n_params(), lr=lr)
    for _ in range(iters):
        t = rng.integers(1, policy.sched.T + 1, size=16)
        eps = rng.standard_normal((16, policy.cfg.action_dim))
        ab = policy.sched.alpha_bar[t - 1][:, None]
        xt = np.sqrt(ab) * x0[None, :] + np.sqrt(1 - ab) * eps
        _, grad = denoiser_grad(policy, xt, t, obs, eps, np.full(16, 1 / 16))
        adamw_step(policy.params, grad, state)
    return x0


def test_ddim_stride_robustness_on_trained_toy():
    policy = small_policy(seed=8)
    _train_toy_denoiser(policy)
    noise = np.random.default_rng(5).standard_normal(SMALL_CFG.action_dim)
    full = sample_ddim(policy, _free_obs(), policy.sched.T, noise)
    perturbed = sample_ddim(policy, _free_obs(), policy.sched.T - 1, noise)
    gap = np.linalg.norm(action_of(full) - action_of(perturbed))
    assert gap <= 0.05, f"stride perturbation moved output by {gap}"


def test_ddpm_batch_matches_single_draws():
    policy = small_policy(seed=0)
    single = sample_ddpm(policy, _free_obs(), np.random.default_rng(42))
    batch = sample_ddpm_batch(policy, _free_obs(), 1, np.random.default_rng(42))
    np.testing.assert_array_equal(single.norm, batch[0].norm)


# ---------------------------------------------------------------------------
# Trajectories and normalization
# ---------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=16, max_size=16))
def test_normalization_round_trip_exact(vals):
    x = np.array(vals)
    traj = trajectory_from_action(x, a_max=0.3, horizon=8)
    again = trajectory_from_action(action_of(traj), a_max=0.3, horizon=8)
    np.testing.assert_array_equal(again.norm, traj.norm)
    np.testing.assert_array_equal(again.deltas, traj.deltas)


def test_trajectory_from_deltas_clamps_to_disc():
    traj = trajectory_from_deltas(np.array([[0.5, -0.9], [0.1, 0.0]]), a_max=0.3)
    # oversized rows are rescaled onto the a_max disc, keeping direction
    assert np.hypot(*traj.deltas[0]) == pytest.approx(0.3, abs=1e-12)
    assert traj.deltas[0, 0] / traj.deltas[0, 1] == pytest.approx(0.5 / -0.9)
    np.testing.assert_allclose(traj.deltas[1], [0.1, 0.0])
    assert np.hypot(traj.deltas[:, 0], traj.deltas[:, 1]).max() <= 0.3 + 1e-12


def test_trajectory_waypoints_cumsum():
    traj = trajectory_from_deltas(np.array([[0.1, 0.0], [0.1, 0.1]]), a_max=0.3)
    wps = traj.waypoints(np.array([1.0, 2.0]))
    np.testing.assert_allclose(wps, [[1.1, 2.0], [1.2, 2.1]])
    assert traj.length() == pytest.approx(0.1 + math.hypot(0.1, 0.1))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    policy = small_policy(seed=12)
    rng = np.random.default_rng(12)
    theta = rng.standard_normal(policy.params.n_params())
    policy.params.set_flat(theta)
    state = new_adamw_state(theta.size, lr=1e-3, weight_decay=0.01)
    state.m = rng.standard_normal(theta.size)
    state.v = np.abs(rng.standard_normal(theta.size))
    state.step = 17
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, policy, state, meta={"note": "test"})
    loaded, opt = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.params.flat(), policy.params.flat())
    np.testing.assert_array_equal(opt.m, state.m)
    np.testing.assert_array_equal(opt.v, state.v)
    assert opt.step == 17 and opt.weight_decay == 0.01
    assert loaded.cfg == policy.cfg
    # saving the loaded policy reproduces the file byte for byte
    path2 = tmp_path / "ckpt2.json"
    save_checkpoint(path2, loaded, opt, meta={"note": "test"})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_without_optimizer(tmp_path):
    policy = small_policy(seed=1)
    path = tmp_path / "p.json"
    save_checkpoint(path, policy)
    loaded, opt = load_checkpoint(path)
    assert opt is None
    np.testing.assert_array_equal(loaded.params.flat(), policy.params.flat())


def test_param_count_query():
    policy = small_policy()
    d = SMALL_CFG
    expected = (d.input_dim * 10 + 10) + (10 * 10 + 10) + (10 * d.action_dim + d.action_dim)
    assert policy.params.n_params() == expected


def test_time_embedding_shape_and_range():
    emb = time_embedding(np.arange(1, 11), 32)
    assert emb.shape == (10, 32)
    assert (np.abs(emb) <= 1.0).all()
