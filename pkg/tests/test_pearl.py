import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats

from zsrl.building import SIMS, STEPS_PER_DAY, ThermalSim, rbc_action
from zsrl.pearl import (
    EnsembleDynamics,
    EnsembleTrainer,
    ModelTrainConfig,
    PearlConfig,
    PlanState,
    Trajectories,
    assign_members,
    elite_weights,
    expected_return,
    gaussian_nll,
    mppi_update,
    nll_loss,
    particle_returns,
    particle_rollout,
    pearl_episode,
    plan,
    reward_variance,
)

f64 = torch.float64


class LinearModel:
    """``s' = A s + B a`` with optional per-member offsets and a fixed variance."""

    def __init__(self, A, B, n_members=1, var=0.0, offsets=None):
        self.A, self.B = torch.as_tensor(A, dtype=f64), torch.as_tensor(B, dtype=f64)
        self.n_members, self.var = n_members, var
        self.offsets = offsets
        self.seen = []

    def predict(self, members, states, actions, t):
        self.seen.append(members.clone())
        mean = states @ self.A.T + actions @ self.B.T
        if self.offsets is not None:
            mean = mean + self.offsets(members, actions)
        return mean, torch.full_like(mean, self.var)


def test_nll_closed_forms():
    d = 3
    y = torch.randn(4, d, dtype=f64)
    base = gaussian_nll(y, torch.ones(4, d, dtype=f64), y).item()
    assert base == pytest.approx(d / 2 * math.log(2 * math.pi), abs=1e-12)
    doubled = gaussian_nll(y, torch.full((4, d), 2.0, dtype=f64), y).item()
    assert doubled - base == pytest.approx(d / 2 * math.log(2), abs=1e-12)
    g = torch.Generator().manual_seed(0)
    mean, var, target = torch.randn(5, d, generator=g, dtype=f64), torch.rand(5, d, generator=g, dtype=f64) + 0.1, torch.randn(5, d, generator=g, dtype=f64)
    ref = -stats.norm.logpdf(target.numpy(), mean.numpy(), np.sqrt(var.numpy())).sum(-1).mean()
    assert abs(gaussian_nll(mean, var, target).item() - ref) < 1e-8
    with pytest.raises(ValueError):
        gaussian_nll(mean, torch.zeros_like(var), target)


def test_nll_loss_gradient_through_member():
    from conftest import fd_check

    ens = EnsembleDynamics(3, 2, n_members=2, hidden=(5,), seed=0, dtype=f64)
    x, y = torch.randn(6, 3, dtype=f64), torch.randn(6, 2, dtype=f64)
    member = lambda inp: tuple(t[0] for t in ens.forward_normalised(inp.expand(2, -1, -1)))
    params = dict(ens.named_parameters())
    assert fd_check(lambda: nll_loss(member, x, y), params, n_coords=30) < 1e-4


def test_ensemble_variance_positive_and_shapes():
    ens = EnsembleDynamics(4, 3, n_members=5, hidden=(8, 8), seed=0)
    with torch.no_grad():
        for w in ens.weights:
            w.mul_(50)
    mean, var = ens.predict_all(torch.randn(7, 4) * 100)
    assert mean.shape == var.shape == (5, 7, 3)
    assert torch.all(var > 0)


def test_nll_decreases_monotonically_on_linear_data():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3))
    y = x @ np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 3.0]])
    ens = EnsembleDynamics(3, 2, n_members=3, hidden=(16,), seed=0, dtype=f64)
    ens.set_normaliser(x, y)
    xn = ((torch.as_tensor(x) - ens.x_mean) / ens.x_std).expand(3, -1, -1)
    yn = (torch.as_tensor(y) - ens.y_mean) / ens.y_std
    opt = torch.optim.Adam(ens.parameters(), lr=1e-3)
    losses = []
    for _ in range(100):
        mean, var = ens.forward_normalised(xn)
        loss = gaussian_nll(mean.reshape(-1, 2), var.reshape(-1, 2), yn.repeat(3, 1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.all(np.diff(losses) < 0)


def test_trainer_fits_linear_dynamics():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 2))
    y = x @ np.array([[1.0], [-1.0]])
    ens = EnsembleDynamics(2, 1, n_members=3, hidden=(16,), seed=0)
    trainer = EnsembleTrainer(ens, ModelTrainConfig(epochs=60, minibatch=32, lr=3e-3), seed=0)
    trainer.fit(x, y)
    mean, _ = ens.predict_all(torch.as_tensor(x[:20], dtype=torch.float32))
    assert np.abs(mean.mean(0).detach().numpy() - y[:20]).max() < 0.2


def test_linear_rollout_matches_matrix_powers(float64):
    A = np.array([[0.9, 0.1], [-0.2, 0.95]])
    B = np.array([[0.5], [0.1]])
    model = LinearModel(A, B)
    s0 = np.array([1.0, -1.0])
    acts = np.sin(np.arange(12.0))[:, None]
    traj = particle_rollout(model, s0, acts, 3, np.random.default_rng(0))
    s = s0.copy()
    for t in range(12):
        s = A @ s + B @ acts[t]
        for m in range(3):
            np.testing.assert_allclose(traj.states[0, m, t + 1].numpy(), s, atol=1e-6)


def test_zero_variance_single_member_particles_identical(float64):
    model = LinearModel(np.eye(1), np.eye(1))
    traj = particle_rollout(model, np.zeros(1), np.ones((3, 5, 1)), 6, np.random.default_rng(0))
    assert torch.all(traj.states == traj.states[:, :1])
    with pytest.raises(ValueError):
        particle_rollout(model, np.zeros(1), np.ones((5, 1)), 0, np.random.default_rng(0))


@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 1000))
def test_member_assignment_is_balanced_partition(M, K, seed):
    members = assign_members(M, K, np.random.default_rng(seed))
    assert len(members) == M and set(members) <= set(range(K))
    counts = np.bincount(members, minlength=K)
    assert counts.max() - counts.min() <= 1


def test_particle_keeps_member_for_whole_rollout(float64):
    model = LinearModel(np.eye(1), np.eye(1), n_members=3, var=0.1)
    traj = particle_rollout(model, np.zeros(1), np.ones((2, 4, 1)), 5, np.random.default_rng(0))
    assert len(model.seen) == 4 and all(torch.equal(model.seen[0], s) for s in model.seen)
    assert torch.equal(model.seen[0], traj.members.repeat(2))


def _traj(states):
    states = torch.as_tensor(states, dtype=f64)
    U, M, H1, _ = states.shape
    return Trajectories(states, torch.zeros(U, H1 - 1, 1, dtype=f64), torch.zeros(M, dtype=torch.long))


def test_return_and_variance_oracles():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(4, 6, 8, 2))
    traj = _traj(states)
    reward = lambda s, a, t: s.sum(-1) * (1 + t.to(s.dtype))
    assert torch.all(expected_return(traj, lambda s, a, t: torch.zeros(s.shape[:-1], dtype=f64)) == 0)
    # straight-line accumulation
    sums = np.zeros((4, 6))
    for t in range(7):
        sums += states[:, :, t + 1].sum(-1) * (1 + t)
    np.testing.assert_allclose(particle_returns(traj, reward).numpy(), sums, atol=1e-12)
    np.testing.assert_allclose(expected_return(traj, reward).numpy(), sums.mean(1), atol=1e-12)
    two_pass = ((sums - sums.mean(1, keepdims=True)) ** 2).mean(1)
    np.testing.assert_allclose(reward_variance(traj, reward).numpy(), two_pass, atol=1e-10)
    one = _traj(states[:, :1])
    np.testing.assert_allclose(expected_return(one, reward).numpy(), sums[:, 0], atol=1e-12)


def test_variance_small_cases():
    ident = lambda s, a, t: s[..., 0]
    pair = _traj(np.array([0.0, 0.0, 0.0, 2.0]).reshape(1, 2, 2, 1))
    assert reward_variance(pair, ident).item() == pytest.approx(1.0)
    same = _traj(np.ones((1, 3, 4, 1)))
    assert reward_variance(same, ident).item() == 0.0
    with pytest.raises(ValueError):
        reward_variance(_traj(np.ones((1, 1, 4, 1))), ident)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(0.01, 100.0))
def test_elite_weights_are_simplex(scores, temp):
    w = elite_weights(np.array(scores), temp)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_mppi_limits():
    base = PlanState(np.zeros((3, 1)), np.ones((3, 1)), n_elites=4, temperature=1e6)
    seqs = np.random.default_rng(0).normal(size=(10, 3, 1))
    scores = np.arange(10.0)
    out = mppi_update(base, seqs, scores)
    np.testing.assert_allclose(out.mu, seqs[9])
    assert np.all(out.sigma >= 1e-3)
    flat = mppi_update(PlanState(np.zeros((3, 1)), np.ones((3, 1)), n_elites=10, temperature=1.0), seqs, np.zeros(10))
    np.testing.assert_allclose(flat.mu, seqs.mean(0))
    with pytest.raises(ValueError):
        mppi_update(base, seqs[:2], scores[:2])


def test_plan_state_defaults_and_shift():
    p = PlanState.initial(30, 2, (16.0, 26.0))
    assert (p.U, p.M, p.n_iters, p.H) == (25, 10, 5, 30)
    assert np.all(p.mu == 21.0) and np.all(p.sigma == 1.25)
    p.mu[:, 0] = np.arange(30)
    s = p.shifted(0.5)
    assert s.mu[0, 0] == 1 and s.mu[-1, 0] == 29 and np.all(s.sigma == 0.5)


def quadratic_plan(seed: int, target: float = 0.37):
    """One-step plan on ``r = -(a - target)^2`` with ``s' = a``; returns the chosen action."""
    torch.set_default_dtype(f64)
    try:
        model = LinearModel(np.zeros((1, 1)), np.eye(1))
        reward = lambda s, a, t: -((s[..., 0] - target) ** 2)
        p = PlanState(np.zeros((1, 1)), np.full((1, 1), 2.0), U=25, M=1, n_iters=5, temperature=10.0, n_elites=5, bounds=(-3.0, 3.0))
        a, _ = plan(model, np.zeros(1), p, reward, np.random.default_rng(seed))
        return float(a[0])
    finally:
        torch.set_default_dtype(torch.float32)


def test_quadratic_planner_finds_argmax():
    errs = [abs(quadratic_plan(s) - 0.37) for s in range(20)]
    assert max(errs) < 0.05


def test_variance_objective_seeks_disagreement(float64):
    # members agree for a <= 0 and diverge for a > 0
    offsets = lambda members, a: (members[:, None].to(f64) * 2 - 1) * a.clamp_min(0.0)
    model = LinearModel(np.zeros((1, 1)), np.eye(1), n_members=2, offsets=offsets)
    reward = lambda s, a, t: s[..., 0]
    p = PlanState(np.zeros((2, 1)), np.ones((2, 1)), U=25, M=4, n_iters=5, n_elites=5, temperature=1.0, bounds=(-1.0, 1.0))
    a, _ = plan(model, np.zeros(1), p, reward, np.random.default_rng(0), objective="variance")
    assert a[0] > 0.5
    with pytest.raises(ValueError):
        plan(model, np.zeros(1), p, reward, np.random.default_rng(0), objective="bogus")


def test_config_defaults():
    cfg = PearlConfig()
    assert (cfg.H, cfg.commissioning_steps, cfg.U, cfg.M, cfg.n_members, cfg.n_iters) == (30, 18, 25, 10, 5, 5)
    with pytest.raises(ValueError):
        PearlConfig(controller="sac")


def test_rbc_episode_matches_hand_loop():
    cfg = PearlConfig(controller="rbc")
    res = pearl_episode("rc3zone", cfg, 2, seed=3)
    sim = ThermalSim(SIMS["rc3zone"], 2, 3)
    state = sim.reset()
    sp = np.full(3, 22.0)
    emissions = 0.0
    for t in range(2 * STEPS_PER_DAY):
        sp = rbc_action(state.zone_temps, sp)
        nxt, energy = sim.step(state, sp)
        if t >= cfg.commissioning_steps:
            emissions += energy * state.carbon
        state = nxt
    assert res.emissions_kg == pytest.approx(emissions / 1000, rel=1e-12)
    assert res.infraction_rate == 0.0
    assert len(res.daily_mean_temp) == 2


@pytest.mark.parametrize("controller", ["rw", "mpc-det"])
def test_other_controllers_run(controller):
    cfg = PearlConfig(controller=controller, U=6, n_iters=2, horizon_minutes=60, train=ModelTrainConfig(epochs=2))
    res = pearl_episode("rc1zone", cfg, 1, seed=0)
    assert np.isfinite(res.emissions_kg) and res.latency_ms >= 0
    assert {k for _, k, _ in res.log} == {"daily_mean_temp", "emissions_kg"}
