"""Probabilistic-ensemble dynamics, trajectory-sampling MPPI and the zero-shot building-control loop.

The controller starts with no data.  During a short commissioning window it
plans action sequences that maximise the ensemble's disagreement about
return (variance objective), refitting the model after every transition.
Afterwards it plans for expected return and refits once per simulated day.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .building import (
    SIMS,
    STEPS_PER_DAY,
    BuildingConfig,
    ComfortRewardConfig,
    ThermalSim,
    building_reward,
    hour_of_step,
    random_walk_action,
    rbc_action,
)
from .nets import seed_generator

Tensor = torch.Tensor
VAR_FLOOR = 1e-6
SIGMA_FLOOR = 1e-3
CONTROLLERS = ("pearl", "rbc", "rw", "mpc-det")


# ---------------------------------------------------------------------------
# ensemble


class EnsembleDynamics(nn.Module):
    """``K`` Gaussian MLPs evaluated together; inputs and outputs are standardised internally."""

    def __init__(self, in_dim: int, out_dim: int, n_members: int = 5, hidden=(64, 64), seed: int = 0, dtype=torch.float32):
        super().__init__()
        g = seed_generator(seed)
        self.in_dim, self.out_dim, self.n_members = in_dim, out_dim, n_members
        widths = (in_dim,) + tuple(hidden) + (2 * out_dim,)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = (torch.rand(n_members, fan_in, fan_out, generator=g, dtype=dtype) * 2 - 1) * bound
            b = (torch.rand(n_members, 1, fan_out, generator=g, dtype=dtype) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))
        self.register_buffer("x_mean", torch.zeros(in_dim, dtype=dtype))
        self.register_buffer("x_std", torch.ones(in_dim, dtype=dtype))
        self.register_buffer("y_mean", torch.zeros(out_dim, dtype=dtype))
        self.register_buffer("y_std", torch.ones(out_dim, dtype=dtype))

    def set_normaliser(self, x: np.ndarray, y: np.ndarray, floor: float = 1e-3) -> None:
        dt = self.x_mean.dtype
        self.x_mean.copy_(torch.as_tensor(x.mean(0), dtype=dt))
        self.x_std.copy_(torch.as_tensor(np.maximum(x.std(0), floor), dtype=dt))
        self.y_mean.copy_(torch.as_tensor(y.mean(0), dtype=dt))
        self.y_std.copy_(torch.as_tensor(np.maximum(y.std(0), floor), dtype=dt))

    def forward_normalised(self, xn: Tensor) -> Tuple[Tensor, Tensor]:
        """``[K, N, in]`` standardised inputs -> standardised ``(mean, var)`` each ``[K, N, out]``."""
        h = xn
        layers = list(zip(self.weights, self.biases))
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            h = torch.baddbmm(b, h, w)
            if i < last:
                h = torch.tanh(h)
        mean, raw = h.split(self.out_dim, -1)
        return mean, nn.functional.softplus(raw) + VAR_FLOOR

    def predict_all(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Raw-unit ``(mean, var)`` of every member for inputs ``[N, in]`` -> ``[K, N, out]``."""
        xn = (x - self.x_mean) / self.x_std
        mean, var = self.forward_normalised(xn.expand(self.n_members, -1, -1))
        return mean * self.y_std + self.y_mean, var * self.y_std**2


def gaussian_nll(mean: Tensor, var: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of the summed per-dimension Gaussian negative log-likelihood."""
    if bool((var <= 0).any()):
        raise ValueError("variances must be positive")
    nll = 0.5 * (torch.log(2 * math.pi * var) + (target - mean) ** 2 / var)
    return nll.sum(-1).mean()


def nll_loss(member: Callable[[Tensor], Tuple[Tensor, Tensor]], x: Tensor, y: Tensor) -> Tensor:
    """NLL of ``y`` under a member's predicted Gaussian at ``x``."""
    mean, var = member(x)
    return gaussian_nll(mean, var, y)


@dataclass(frozen=True)
class ModelTrainConfig:
    epochs: int = 25
    minibatch: int = 32
    lr: float = 3e-4


class EnsembleTrainer:
    """Bootstrap-resampled maximum-likelihood fitting; the optimiser persists across refits."""

    def __init__(self, model: EnsembleDynamics, cfg: ModelTrainConfig, seed: int = 0):
        self.model, self.cfg = model, cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(seed)

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: Optional[int] = None) -> float:
        m, cfg = self.model, self.cfg
        m.set_normaliser(x, y)
        dt = m.x_mean.dtype
        xn = (torch.as_tensor(x, dtype=dt) - m.x_mean) / m.x_std
        yn = (torch.as_tensor(y, dtype=dt) - m.y_mean) / m.y_std
        n, k = len(x), m.n_members
        boot = torch.as_tensor(self.rng.integers(0, n, size=(k, n)))
        loss = float("nan")
        for _ in range(cfg.epochs if epochs is None else epochs):
            order = torch.as_tensor(self.rng.permuted(np.tile(np.arange(n), (k, 1)), axis=1))
            for start in range(0, n, cfg.minibatch):
                idx = torch.gather(boot, 1, order[:, start : start + cfg.minibatch])
                mean, var = m.forward_normalised(xn[idx])
                nll = 0.5 * (torch.log(2 * math.pi * var) + (yn[idx] - mean) ** 2 / var)
                loss_t = nll.sum(-1).mean() * k
                self.opt.zero_grad(set_to_none=True)
                loss_t.backward()
                self.opt.step()
                loss = loss_t.item() / k
        return loss


# ---------------------------------------------------------------------------
# trajectory sampling


@dataclass
class Trajectories:
    states: Tensor  # [U, M, H + 1, S]
    actions: Tensor  # [U, H, A]
    members: Tensor  # [M]


def assign_members(n_particles: int, n_members: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random assignment: each particle gets one member for the whole rollout."""
    reps = np.resize(np.arange(n_members), n_particles)
    return rng.permutation(reps)


def particle_rollout(model, s0, actions, M: int, rng: np.random.Generator, members: Optional[np.ndarray] = None) -> Trajectories:
    """Unroll ``M`` particles per action sequence, sampling each step from the particle's member.

    ``model.predict(members [R], states [R, S], actions [R, A], t) -> (mean, var)``.
    ``actions`` is ``[H, A]`` or ``[U, H, A]``.
    """
    if M < 1:
        raise ValueError("need at least one particle")
    actions = torch.as_tensor(actions, dtype=torch.get_default_dtype())
    if actions.ndim == 2:
        actions = actions[None]
    U, H, _ = actions.shape
    if members is None:
        members = assign_members(M, model.n_members, rng)
    members_t = torch.as_tensor(members)
    s = torch.as_tensor(np.asarray(s0), dtype=actions.dtype).expand(U, M, -1).reshape(U * M, -1)
    row_members = members_t.repeat(U)
    out = [s]
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    with torch.no_grad():
        for t in range(H):
            a = actions[:, t].repeat_interleave(M, 0)
            mean, var = model.predict(row_members, s, a, t)
            s = mean + var.sqrt() * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
            out.append(s)
    states = torch.stack(out, 1).reshape(U, M, H + 1, -1)
    return Trajectories(states, actions, members_t)


def particle_returns(traj: Trajectories, reward_fn) -> Tensor:
    """``[U, M]`` per-particle sums of ``reward_fn(next_states [U,M,H,S], actions [U,1,H,A], t [H])``."""
    H = traj.actions.shape[1]
    r = reward_fn(traj.states[:, :, 1:], traj.actions[:, None], torch.arange(H))
    return r.sum(-1)


def expected_return(traj: Trajectories, reward_fn) -> Tensor:
    """``G = mean over particles of the summed horizon reward``, one value per sequence."""
    return particle_returns(traj, reward_fn).mean(-1)


def reward_variance(traj: Trajectories, reward_fn) -> Tensor:
    """Population variance across particles of the summed horizon reward."""
    if traj.states.shape[1] < 2:
        raise ValueError("reward variance needs at least two particles")
    return particle_returns(traj, reward_fn).var(-1, unbiased=False)


# ---------------------------------------------------------------------------
# MPPI


@dataclass
class PlanState:
    mu: np.ndarray  # [H, A]
    sigma: np.ndarray  # [H, A]
    U: int = 25
    M: int = 10
    n_iters: int = 5
    temperature: float = 1.0
    n_elites: int = 5
    bounds: Tuple[float, float] = (-np.inf, np.inf)

    @property
    def H(self) -> int:
        return self.mu.shape[0]

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_FLOOR)

    @classmethod
    def initial(cls, H: int, action_dim: int, bounds: Tuple[float, float], **kw) -> "PlanState":
        lo, hi = bounds
        return cls(np.full((H, action_dim), (lo + hi) / 2), np.full((H, action_dim), (hi - lo) / 8), bounds=bounds, **kw)

    def shifted(self, sigma0: float) -> "PlanState":
        """Warm start for the next control step: drop the executed action, repeat the last one."""
        mu = np.concatenate([self.mu[1:], self.mu[-1:]], 0)
        return replace(self, mu=mu, sigma=np.full_like(self.sigma, sigma0))


def elite_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    w = np.exp(temperature * (scores - scores.max()))
    return w / w.sum()


def mppi_update(plan: PlanState, sequences: np.ndarray, scores: np.ndarray) -> PlanState:
    """Top-``e`` sequences, weights ``exp(temperature (G - max G))``; weighted mean and std."""
    sequences = np.asarray(sequences, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < plan.n_elites:
        raise ValueError("fewer sequences than elites")
    elite = np.argsort(-scores, kind="stable")[: plan.n_elites]
    w = elite_weights(scores[elite], plan.temperature)
    seqs = sequences[elite]
    mu = np.tensordot(w, seqs, 1)
    sigma = np.sqrt(np.tensordot(w, (seqs - mu) ** 2, 1))
    return replace(plan, mu=mu, sigma=np.maximum(sigma, SIGMA_FLOOR))


def plan_actions(model, s0, plan: PlanState, reward_fn, rng: np.random.Generator, objective: str = "return") -> Tuple[np.ndarray, PlanState]:
    """``n_iters`` rounds of sample / roll out / score / refit; returns ``mu[0]`` and the final plan."""
    if objective not in ("return", "variance"):
        raise ValueError("objective must be 'return' or 'variance'")
    lo, hi = plan.bounds
    for _ in range(plan.n_iters):
        noise = rng.standard_normal((plan.U,) + plan.mu.shape)
        seqs = np.clip(plan.mu + plan.sigma * noise, lo, hi)
        traj = particle_rollout(model, s0, seqs, plan.M, rng)
        score = expected_return(traj, reward_fn) if objective == "return" else reward_variance(traj, reward_fn)
        plan = mppi_update(plan, seqs, score.double().numpy())
    return plan.mu[0].copy(), plan


plan = plan_actions


# ---------------------------------------------------------------------------
# building control loop


@dataclass(frozen=True)
class PearlConfig:
    controller: str = "pearl"
    horizon_minutes: int = 300
    U: int = 25
    M: int = 10
    n_iters: int = 5
    n_members: int = 5
    temperature: float = 10.0
    n_elites: int = 5
    commissioning_minutes: int = 180
    hidden: Tuple[int, ...] = (64, 64)
    train: ModelTrainConfig = field(default_factory=ModelTrainConfig)
    reward: ComfortRewardConfig = field(default_factory=ComfortRewardConfig)
    rw_delta: float = 0.5
    rbc_initial: float = 22.0

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")

    @property
    def H(self) -> int:
        return self.horizon_minutes // 10

    @property
    def commissioning_steps(self) -> int:
        return self.commissioning_minutes // 10


def model_inputs(temps: np.ndarray, exterior: np.ndarray, step: np.ndarray, setpoints: np.ndarray) -> np.ndarray:
    """``[zone temps, exterior, sin(hour), cos(hour), setpoints]`` rows."""
    hour = hour_of_step(step)
    ang = 2 * np.pi * hour / 24
    return np.concatenate(
        [temps, np.asarray(exterior)[..., None], np.sin(ang)[..., None], np.cos(ang)[..., None], setpoints], -1
    )


class BuildingModel:
    """Adapter from the ensemble to particle rollouts; state is ``[zone temps, energy of last step]``."""

    def __init__(self, ensemble: EnsembleDynamics, n_zones: int, exterior: np.ndarray, steps: np.ndarray, deterministic: bool = False):
        self.ensemble = ensemble
        self.n_zones = n_zones
        self.n_members = ensemble.n_members
        dt = ensemble.x_mean.dtype
        hour = hour_of_step(steps)
        ang = 2 * np.pi * hour / 24
        self.exog = torch.as_tensor(np.stack([exterior, np.sin(ang), np.cos(ang)], -1), dtype=dt)
        self.deterministic = deterministic
        self._members: Optional[Tensor] = None

    def _member_predict(self, members: Tensor, x: Tensor) -> Tuple[Tensor, Tensor]:
        if members is not self._members:
            # the same row->member tensor is reused for every step of a rollout
            counts = torch.bincount(members, minlength=self.n_members)
            balanced = bool((counts == counts[0]).all())
            order = torch.argsort(members, stable=True)
            inv = torch.empty_like(order)
            inv[order] = torch.arange(len(order))
            self._members, self._grouping = members, (balanced, order, inv)
        balanced, order, inv = self._grouping
        if balanced:
            # evaluate each member on its own rows only
            ens = self.ensemble
            xn = (x[order] - ens.x_mean) / ens.x_std
            mean, var = ens.forward_normalised(xn.reshape(self.n_members, -1, x.shape[-1]))
            mean = (mean * ens.y_std + ens.y_mean).reshape(len(x), -1)
            var = (var * ens.y_std**2).reshape(len(x), -1)
            return mean[inv], var[inv]
        mean, var = self.ensemble.predict_all(x)
        rows = torch.arange(len(x))
        return mean[members, rows], var[members, rows]

    def predict(self, members: Tensor, states: Tensor, actions: Tensor, t: int):
        n = self.n_zones
        temps = states[:, :n].to(self.exog.dtype)
        x = torch.cat([temps, self.exog[t].expand(len(temps), -1), actions.to(temps.dtype)], -1)
        mean, var = self._member_predict(members, x)
        nxt = torch.cat([temps + mean[:, :n], mean[:, n:]], -1)
        if self.deterministic:
            var = torch.zeros_like(var)
        return nxt.to(states.dtype), var.to(states.dtype)


def planning_reward(carbon: np.ndarray, cfg: ComfortRewardConfig, n_zones: int):
    carbon_t = torch.as_tensor(carbon)

    def reward_fn(next_states: Tensor, actions: Tensor, t: Tensor) -> Tensor:
        temps = next_states[..., :n_zones]
        energy = next_states[..., n_zones].clamp_min(0.0)
        lo, hi = cfg.T_low, cfg.T_high
        below = (lo - temps).clamp_min(0.0)
        above = (temps - hi).clamp_min(0.0)
        temp_term = -(below**2 + above**2).sum(-1)
        emissions = -cfg.phi_emissions_weight * energy * carbon_t[t].to(energy.dtype)
        return emissions + temp_term

    return reward_fn


@dataclass
class EpisodeResult:
    emissions_kg: float
    infraction_rate: float
    mean_reward: float
    latency_ms: float
    daily_mean_temp: np.ndarray
    log: List[Tuple[int, str, float]]

    def summary(self) -> Dict[str, float]:
        return {
            "emissions_kg": self.emissions_kg,
            "infraction_rate": self.infraction_rate,
            "mean_reward": self.mean_reward,
            "latency_ms": self.latency_ms,
        }


class _Recorder:
    """Accumulates metrics for steps at or after ``start``; commissioning steps are not scored."""

    def __init__(self, start: int, days: int, n_zones: int, reward_cfg: ComfortRewardConfig):
        self.start, self.days, self.reward_cfg = start, days, reward_cfg
        self.emissions_g = 0.0
        self.rewards: List[float] = []
        self.temp_sum = np.zeros(days)
        self.temp_count = np.zeros(days)
        self.log: List[Tuple[int, str, float]] = []

    def add(self, t: int, temps: np.ndarray, energy: float, carbon: float) -> None:
        if t < self.start:
            return
        r, _, _ = building_reward(temps, energy, carbon, self.reward_cfg)
        self.emissions_g += energy * carbon
        self.rewards.append(float(r))
        day = t // STEPS_PER_DAY
        self.temp_sum[day] += float(np.mean(temps))
        self.temp_count[day] += 1
        if (t + 1) % STEPS_PER_DAY == 0:
            self.log.append((t + 1, "daily_mean_temp", self.temp_sum[day] / max(self.temp_count[day], 1)))
            self.log.append((t + 1, "emissions_kg", self.emissions_g / 1000))

    def result(self, latency: float) -> EpisodeResult:
        cfg = self.reward_cfg
        daily = self.temp_sum / np.maximum(self.temp_count, 1)
        scored = self.temp_count > 0
        out = (daily < cfg.T_low) | (daily > cfg.T_high)
        rate = float(out[scored].mean()) if scored.any() else 0.0
        return EpisodeResult(self.emissions_g / 1000, rate, float(np.mean(self.rewards)), latency, daily, self.log)


def pearl_episode(sim_name: str, cfg: PearlConfig, days: int, seed: int) -> EpisodeResult:
    """Run one controller on a fresh simulator for ``days`` days.

    Metrics cover the evaluation period only (after the commissioning window)
    so every controller is scored over the same steps.
    """
    bcfg: BuildingConfig = SIMS[sim_name]
    sim = ThermalSim(bcfg, days, seed)
    rng = np.random.default_rng(seed + 1)
    n = bcfg.n_zones
    bounds = bcfg.setpoint_bounds
    total = days * STEPS_PER_DAY
    C = cfg.commissioning_steps
    rec = _Recorder(C, days, n, cfg.reward)

    learned = cfg.controller in ("pearl", "mpc-det")
    if learned:
        k = cfg.n_members if cfg.controller == "pearl" else 1
        ensemble = EnsembleDynamics(2 * n + 3, n + 1, k, cfg.hidden, seed)
        trainer = EnsembleTrainer(ensemble, cfg.train, seed)
        plan = PlanState.initial(cfg.H, n, bounds, U=cfg.U, M=cfg.M if cfg.controller == "pearl" else 1,
                                 n_iters=cfg.n_iters, temperature=cfg.temperature, n_elites=cfg.n_elites)
        sigma0 = (bounds[1] - bounds[0]) / 8
    xs: List[np.ndarray] = []
    ys: List[np.ndarray] = []

    state = sim.reset()
    setpoints = np.full(n, cfg.rbc_initial if cfg.controller == "rbc" else sum(bounds) / 2)
    latency = []
    for t in range(total):
        tic = time.perf_counter()
        if cfg.controller == "rbc":
            setpoints = rbc_action(state.zone_temps, setpoints, bounds)
        elif cfg.controller == "rw" or (cfg.controller == "mpc-det" and t < C):
            setpoints = random_walk_action(setpoints, bounds, cfg.rw_delta, rng)
        elif not xs:
            setpoints = rng.uniform(*bounds, n)
        else:
            steps = np.arange(t, t + cfg.H)
            model = BuildingModel(ensemble, n, sim.exterior(steps), steps, deterministic=cfg.controller == "mpc-det")
            reward_fn = planning_reward(sim.carbon(steps), cfg.reward, n)
            s0 = np.concatenate([state.zone_temps, [0.0]])
            objective = "variance" if (cfg.controller == "pearl" and t < C) else "return"
            setpoints, plan = plan_actions(model, s0, plan, reward_fn, rng, objective)
            plan = plan.shifted(sigma0)
        latency.append(time.perf_counter() - tic)

        nxt, energy = sim.step(state, setpoints)
        rec.add(t, nxt.zone_temps, energy, state.carbon)
        if learned:
            xs.append(model_inputs(state.zone_temps, np.asarray(state.exterior_temp), np.asarray(state.step), setpoints))
            ys.append(np.concatenate([nxt.zone_temps - state.zone_temps, [energy]]))
            end_of_day = (t + 1) % STEPS_PER_DAY == 0
            if (t < C and cfg.controller == "pearl") or t + 1 == C or (t >= C and end_of_day):
                trainer.fit(np.stack(xs), np.stack(ys))
        state = nxt
    return rec.result(1000 * float(np.mean(latency)))
