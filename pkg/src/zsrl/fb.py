"""Forward-backward and universal successor feature agents for discrete actions.

``F(s, a, z)`` is produced for every action at once as an ``[N, n_actions, d]``
tensor, ``B(s)`` as ``[N, d]``.  The measure ``M(s, a, ds+)`` is approximated by
``F(s, a, z)^T B(s+) rho(ds+)`` where ``rho`` is the data distribution, so
``Q_z(s, a) = F(s, a, z)^T z`` once ``z = E_rho[r(s) B(s)]``.

Networks receive ``z`` projected onto the sqrt(d)-sphere, which makes the greedy
policy ``argmax_a F(s, a, z)^T z`` invariant to positive rescaling of ``z``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import Dataset, LabelledSample
from .nets import MLP, MLPSpec, seed_generator

Tensor = torch.Tensor


@dataclass(frozen=True)
class FBConfig:
    z_dim: int = 50
    gamma: float = 0.98
    preprocessor_hidden: Tuple[int, ...] = (64,)
    preprocessor_out: int = 64
    forward_hidden: Tuple[int, ...] = (128, 128)
    backward_hidden: Tuple[int, ...] = (64, 64, 64)
    actor_hidden: Tuple[int, ...] = (128, 128)
    lr: float = 1e-4
    actor_lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 512
    polyak: float = 0.01
    z_mix: float = 0.5
    ortho_coef: float = 1.0
    grad_clip: float = 1.0
    labels: int = 10_000
    # successor-feature agents only
    laplacian_lambda: float = 1.0
    feature_lr: float = 1e-4
    ridge: float = 1e-6

    @classmethod
    def full_scale(cls, **overrides) -> "FBConfig":
        """Wide networks for large-compute runs; the dataclass defaults are desk scale."""
        base = cls(
            preprocessor_hidden=(1024,),
            preprocessor_out=512,
            forward_hidden=(1024, 1024),
            backward_hidden=(256, 256, 256),
            actor_hidden=(1024, 1024),
        )
        return replace(base, **overrides)


def project_sphere(z: Tensor, eps: float = 1e-12) -> Tensor:
    """Rescale rows of ``z`` to norm sqrt(d); zero rows stay zero."""
    d = z.shape[-1]
    norm = z.norm(dim=-1, keepdim=True)
    return math.sqrt(d) * z / norm.clamp_min(eps)


# ---------------------------------------------------------------------------
# networks


class ForwardNet(nn.Module):
    """``(s, a, z) -> d`` through separate ``(s, a)`` and ``(s, z)`` preprocessors.

    Actions enter one-hot, so values generalise across actions; ``forward``
    evaluates every action and returns ``[N, n_actions, d]``.
    """

    def __init__(self, obs_dim: int, n_actions: int, out_dim: int, cfg: FBConfig, generator=None):
        super().__init__()
        self.n_actions, self.out_dim = n_actions, out_dim
        emb = cfg.preprocessor_out
        self.pre_sa = MLP(MLPSpec(obs_dim + n_actions, cfg.preprocessor_hidden, emb), generator)
        self.pre_sz = MLP(MLPSpec(obs_dim + cfg.z_dim, cfg.preprocessor_hidden, emb), generator)
        self.trunk = MLP(MLPSpec(2 * emb, cfg.forward_hidden, out_dim), generator)

    def forward(self, obs: Tensor, z: Tensor) -> Tensor:
        n, na = obs.shape[0], self.n_actions
        z = project_sphere(z)
        onehot = torch.eye(na, dtype=obs.dtype).expand(n, na, na)
        sa = torch.cat([obs[:, None].expand(n, na, obs.shape[-1]), onehot], -1)
        h_sa = self.pre_sa(sa)
        h_sz = self.pre_sz(torch.cat([obs, z], -1))[:, None].expand(n, na, -1)
        return self.trunk(torch.cat([h_sa, h_sz], -1))


class ActorNet(nn.Module):
    """Softmax policy head: ``(s, z) -> logits [n_actions]``."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: FBConfig, generator=None):
        super().__init__()
        emb = cfg.preprocessor_out
        self.pre_s = MLP(MLPSpec(obs_dim, cfg.preprocessor_hidden, emb), generator)
        self.pre_sz = MLP(MLPSpec(obs_dim + cfg.z_dim, cfg.preprocessor_hidden, emb), generator)
        self.trunk = MLP(MLPSpec(2 * emb, cfg.actor_hidden, n_actions), generator)

    def forward(self, obs: Tensor, z: Tensor) -> Tensor:
        z = project_sphere(z)
        h = torch.cat([self.pre_s(obs), self.pre_sz(torch.cat([obs, z], -1))], -1)
        return self.trunk(h)


class TabularForward(nn.Module):
    """``F`` as a free table over (one-hot state, action); ignores ``z``."""

    def __init__(self, n_states: int, n_actions: int, out_dim: int, dtype=torch.float64):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n_states, n_actions, out_dim, dtype=dtype))

    def forward(self, obs: Tensor, z: Tensor) -> Tensor:
        return torch.einsum("ns,sad->nad", obs.to(self.table.dtype), self.table)


class OneHotBackward(nn.Module):
    """``B(s) = s`` for one-hot state encodings (no parameters)."""

    def forward(self, obs: Tensor) -> Tensor:
        return obs


class FixedPolicy(nn.Module):
    """A state-indexed policy table, returned as log-probabilities."""

    def __init__(self, table: np.ndarray, dtype=torch.float64):
        super().__init__()
        self.register_buffer("log_table", torch.log(torch.as_tensor(table, dtype=dtype).clamp_min(1e-300)))

    def forward(self, obs: Tensor, z: Tensor) -> Tensor:
        return obs.to(self.log_table.dtype) @ self.log_table


# ---------------------------------------------------------------------------
# models


class FBModel(nn.Module):
    def __init__(self, forward_net: nn.Module, backward_net: nn.Module, actor: nn.Module, z_dim: int, gamma: float):
        super().__init__()
        self.forward_net = forward_net
        self.backward_net = backward_net
        self.actor = actor
        self.forward_target = copy.deepcopy(forward_net).requires_grad_(False)
        self.backward_target = copy.deepcopy(backward_net).requires_grad_(False)
        self.z_dim, self.gamma = z_dim, gamma

    @classmethod
    def build(cls, obs_dim: int, n_actions: int, cfg: FBConfig, seed: int = 0) -> "FBModel":
        g = seed_generator(seed)
        f = ForwardNet(obs_dim, n_actions, cfg.z_dim, cfg, g)
        b = MLP(MLPSpec(obs_dim, cfg.backward_hidden, cfg.z_dim), g)
        actor = ActorNet(obs_dim, n_actions, cfg, g)
        return cls(f, b, actor, cfg.z_dim, cfg.gamma)

    def F(self, obs: Tensor, z: Tensor) -> Tensor:
        return self.forward_net(obs, z)

    def B(self, obs: Tensor) -> Tensor:
        return self.backward_net(obs)

    def Q(self, obs: Tensor, z: Tensor) -> Tensor:
        """``[N, n_actions]`` values ``F(s, a, z)^T z``."""
        return torch.einsum("nad,nd->na", self.F(obs, z), z)

    def policy_probs(self, obs: Tensor, z: Tensor) -> Tensor:
        return torch.softmax(self.actor(obs, z), -1)

    @torch.no_grad()
    def greedy_actions(self, obs: Tensor, z: Tensor) -> Tensor:
        return self.Q(obs, z).argmax(-1)

    def fb_parameters(self):
        return list(self.forward_net.parameters()) + list(self.backward_net.parameters())

    def update_targets(self, nu: float) -> None:
        from .nets import polyak_update

        polyak_update(self.forward_target, self.forward_net, nu)
        polyak_update(self.backward_target, self.backward_net, nu)


class USFModel(nn.Module):
    """Successor features ``psi(s, a, z)`` over a learned feature map ``phi``."""

    def __init__(self, psi_net: nn.Module, phi_net: nn.Module, actor: nn.Module, z_dim: int, gamma: float):
        super().__init__()
        self.psi_net = psi_net
        self.phi_net = phi_net
        self.actor = actor
        self.psi_target = copy.deepcopy(psi_net).requires_grad_(False)
        self.z_dim, self.gamma = z_dim, gamma

    @classmethod
    def build(cls, obs_dim: int, n_actions: int, cfg: FBConfig, seed: int = 0) -> "USFModel":
        g = seed_generator(seed)
        psi = ForwardNet(obs_dim, n_actions, cfg.z_dim, cfg, g)
        phi = MLP(MLPSpec(obs_dim, cfg.backward_hidden, cfg.z_dim), g)
        actor = ActorNet(obs_dim, n_actions, cfg, g)
        return cls(psi, phi, actor, cfg.z_dim, cfg.gamma)

    def F(self, obs: Tensor, z: Tensor) -> Tensor:
        return self.psi_net(obs, z)

    def B(self, obs: Tensor) -> Tensor:
        return self.phi_net(obs)

    def Q(self, obs: Tensor, z: Tensor) -> Tensor:
        return torch.einsum("nad,nd->na", self.psi_net(obs, z), z)

    def policy_probs(self, obs: Tensor, z: Tensor) -> Tensor:
        return torch.softmax(self.actor(obs, z), -1)

    @torch.no_grad()
    def greedy_actions(self, obs: Tensor, z: Tensor) -> Tensor:
        return self.Q(obs, z).argmax(-1)

    def fb_parameters(self):
        return list(self.psi_net.parameters())

    def update_targets(self, nu: float) -> None:
        from .nets import polyak_update

        polyak_update(self.psi_target, self.psi_net, nu)


# ---------------------------------------------------------------------------
# z sampling and task inference


def sample_z(model, obs: Tensor, generator: torch.Generator, mix: float = 0.5) -> Tuple[Tensor, Tensor]:
    """Draw one z per row of ``obs``: uniform on the sphere, or ``B(s)`` projected onto it.

    Returns ``(z, from_b)`` where ``from_b`` flags rows taken from ``B``.
    """
    n = obs.shape[0]
    if n == 0:
        raise ValueError("need a non-empty batch")
    dtype = obs.dtype
    gauss = torch.randn(n, model.z_dim, generator=generator, dtype=dtype)
    z = project_sphere(gauss)
    from_b = torch.rand(n, generator=generator) < mix
    perm = torch.randperm(n, generator=generator)
    with torch.no_grad():
        zb = project_sphere(model.B(obs[perm]).to(dtype))
    return torch.where(from_b[:, None], zb, z), from_b


def _as_label_arrays(samples) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple):
        obs, rewards = samples
        return np.asarray(obs, np.float32), np.asarray(rewards, np.float64)
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one labelled sample")
    obs = np.stack([s.sample.next_obs for s in samples]).astype(np.float32)
    rewards = np.array([s.reward for s in samples], np.float64)
    return obs, rewards


@torch.no_grad()
def infer_task_fb(model, samples) -> Tensor:
    """``z = mean_i r_i B(s_i)`` where ``s_i`` is the state each reward refers to.

    ``samples`` is a list of :class:`LabelledSample` (reward on arrival in
    ``next_obs``) or an ``(obs, rewards)`` pair of arrays.
    """
    obs, rewards = _as_label_arrays(samples)
    if len(rewards) == 0:
        raise ValueError("need at least one labelled sample")
    b = model.B(torch.as_tensor(obs))
    r = torch.as_tensor(rewards, dtype=b.dtype)
    return (r[:, None] * b).mean(0)


@torch.no_grad()
def infer_task_usf(model, samples, ridge: float = 1e-6) -> Tensor:
    """Ridge-regularised least squares of rewards onto ``phi``."""
    obs, rewards = _as_label_arrays(samples)
    if len(rewards) == 0:
        raise ValueError("need at least one labelled sample")
    phi = model.B(torch.as_tensor(obs)).double()
    r = torch.as_tensor(rewards, dtype=torch.float64)
    gram = phi.T @ phi + ridge * torch.eye(phi.shape[1], dtype=torch.float64)
    z = torch.linalg.solve(gram, phi.T @ r)
    return z.to(torch.get_default_dtype())


# ---------------------------------------------------------------------------
# losses


@dataclass
class FBLossParts:
    loss: Tensor
    f_sa: Tensor
    f_all: Tensor
    b_next: Tensor
    b_plus: Tensor
    measures: Tensor


def fb_loss_from_embeddings(
    f_sa: Tensor, b_plus: Tensor, target_f_next: Tensor, target_b_plus: Tensor, b_next: Tensor, gamma: float
) -> Tuple[Tensor, Tensor]:
    """Mean over all (i, j) pairs of ``(F_i.B+_j - gamma Fbar'_i.Bbar+_j)^2`` minus ``2 mean_i F_i.B(s'_i)``."""
    m = f_sa @ b_plus.T
    target = (target_f_next @ target_b_plus.T).detach()
    loss = (m - gamma * target).pow(2).mean() - 2.0 * (f_sa * b_next).sum(-1).mean()
    return loss, m


def fb_td_loss_parts(model: FBModel, obs, actions, next_obs, plus_obs, z) -> FBLossParts:
    f_all = model.F(obs, z)
    f_sa = f_all[torch.arange(len(actions)), actions]
    with torch.no_grad():
        probs_next = model.policy_probs(next_obs, z)
        target_f_next = (probs_next[..., None] * model.forward_target(next_obs, z)).sum(1)
        target_b_plus = model.backward_target(plus_obs)
    b_next = model.B(next_obs)
    b_plus = model.B(plus_obs)
    loss, m = fb_loss_from_embeddings(f_sa, b_plus, target_f_next, target_b_plus, b_next, model.gamma)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite FB loss")
    return FBLossParts(loss, f_sa, f_all, b_next, b_plus, m)


def fb_td_loss(model: FBModel, obs, actions, next_obs, plus_obs, z) -> Tensor:
    return fb_td_loss_parts(model, obs, actions, next_obs, plus_obs, z).loss


def orthonormality_loss(b: Tensor) -> Tensor:
    """Pushes ``E[B B^T]`` towards the identity: off-diagonal squares minus twice the diagonal."""
    cov = b @ b.T
    n = cov.shape[0]
    off = ~torch.eye(n, dtype=torch.bool)
    return cov[off].pow(2).mean() - 2.0 * cov.diagonal().mean()


def actor_loss(model, obs: Tensor, z: Tensor) -> Tensor:
    """``-mean_s sum_a pi(a | s, z) Q(s, a, z)`` with ``Q`` held fixed."""
    with torch.no_grad():
        q = model.Q(obs, z)
    probs = model.policy_probs(obs, z)
    return -(probs * q).sum(-1).mean()


def usf_td_loss(model: USFModel, obs, actions, next_obs, z) -> Tensor:
    """``mean (psi(s,a,z).z - phi(s').z - gamma psibar(s', pi_z(s'), z).z)^2``; ``phi`` is held fixed."""
    psi_sa = model.psi_net(obs, z)[torch.arange(len(actions)), actions]
    with torch.no_grad():
        probs = model.policy_probs(next_obs, z)
        psi_next = (probs[..., None] * model.psi_target(next_obs, z)).sum(1)
        phi_next = model.phi_net(next_obs)
    td = (psi_sa * z).sum(-1) - (phi_next * z).sum(-1) - model.gamma * (psi_next * z).sum(-1)
    loss = td.pow(2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite USF loss")
    return loss


def laplacian_feature_loss(phi_s: Tensor, phi_next: Tensor, phi_neg_a: Tensor, phi_neg_b: Tensor, lam: float) -> Tensor:
    """Graph-drawing objective: smoothness along transitions plus an orthonormality term on independent pairs."""
    smooth = (phi_s - phi_next).pow(2).sum(-1).mean()
    ortho = ((phi_neg_a * phi_neg_b).sum(-1).pow(2) - phi_neg_a.pow(2).sum(-1) - phi_neg_b.pow(2).sum(-1)).mean()
    return smooth + lam * ortho


# ---------------------------------------------------------------------------
# training


class Batches:
    """Uniform minibatch sampler over a dataset, driven by a torch generator."""

    def __init__(self, dataset: Dataset, generator: torch.Generator):
        self.obs = torch.from_numpy(np.array(dataset.obs))
        self.actions = torch.from_numpy(np.array(dataset.actions))
        self.next_obs = torch.from_numpy(np.array(dataset.next_obs))
        self.n = len(dataset)
        self.generator = generator

    def indices(self, size: int) -> Tensor:
        return torch.randint(self.n, (size,), generator=self.generator)

    def sample(self, size: int) -> Dict[str, Tensor]:
        i, j = self.indices(size), self.indices(size)
        return {
            "obs": self.obs[i],
            "actions": self.actions[i],
            "next_obs": self.next_obs[i],
            "plus_obs": self.next_obs[j],
        }


@dataclass
class TrainLog:
    """Line-delimited telemetry: one ``(step, metric, value)`` record per entry."""

    records: List[Tuple[int, str, float]] = field(default_factory=list)

    def add(self, step: int, metrics: Dict[str, float]) -> None:
        for k, v in metrics.items():
            self.records.append((step, k, float(v)))

    def series(self, metric: str) -> np.ndarray:
        return np.array([v for s, k, v in self.records if k == metric])

    def lines(self) -> List[str]:
        return [f"{s}\t{k}\t{v:.6g}" for s, k, v in self.records]


class FBAgent:
    """Owns an :class:`FBModel`, its optimisers and random streams."""

    def __init__(self, model: FBModel, cfg: FBConfig, seed: int = 0):
        self.model, self.cfg = model, cfg
        self.generator = seed_generator(seed + 1)
        # separate stream so optional penalty terms never shift the main one
        self.aux_generator = seed_generator(seed + 2)
        self.fb_opt = torch.optim.Adam(model.fb_parameters(), lr=cfg.lr, betas=cfg.betas)
        self.actor_opt = torch.optim.Adam(model.actor.parameters(), lr=cfg.actor_lr, betas=cfg.betas)
        self.step = 0

    # hook for conservative variants
    def extra_loss(self, batch, z, parts) -> Tuple[Optional[Tensor], Dict[str, float]]:
        return None, {}

    def core_loss(self, batch, z):
        m = self.model
        parts = fb_td_loss_parts(m, batch["obs"], batch["actions"], batch["next_obs"], batch["plus_obs"], z)
        loss = parts.loss
        if self.cfg.ortho_coef:
            loss = loss + self.cfg.ortho_coef * orthonormality_loss(parts.b_plus)
        return loss, parts

    def update(self, batch: Dict[str, Tensor]) -> Dict[str, float]:
        cfg, m = self.cfg, self.model
        z, _ = sample_z(m, batch["plus_obs"], self.generator, cfg.z_mix)
        loss, parts = self.core_loss(batch, z)
        extra, info = self.extra_loss(batch, z, parts)
        total = loss if extra is None else loss + extra
        if not torch.isfinite(total):
            raise FloatingPointError(f"divergence at step {self.step}")
        self.fb_opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            for p in m.fb_parameters():
                if p.grad is not None:
                    p.grad.data.clamp_(-cfg.grad_clip, cfg.grad_clip)
        self.fb_opt.step()

        a_loss = actor_loss(m, batch["obs"], z)
        self.actor_opt.zero_grad(set_to_none=True)
        a_loss.backward()
        self.actor_opt.step()

        m.update_targets(cfg.polyak)
        self.step += 1
        with torch.no_grad():
            mean_q = (parts.f_sa * z).sum(-1).mean().item()
        return {"fb_loss": parts.loss.item(), "actor_loss": a_loss.item(), "mean_q": mean_q, **info}

    def train(
        self,
        dataset: Dataset,
        steps: int,
        log_every: int = 100,
        callback: Optional[Callable[[int], None]] = None,
        log: Optional[TrainLog] = None,
    ) -> TrainLog:
        """Run ``steps`` updates; ``callback(step)`` fires after every update."""
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        log = log if log is not None else TrainLog()
        batches = Batches(dataset, self.generator)
        for _ in range(steps):
            metrics = self.update(batches.sample(self.cfg.batch_size))
            if self.step % log_every == 0:
                log.add(self.step, metrics)
            if callback is not None:
                callback(self.step)
        return log


class USFAgent(FBAgent):
    """Successor features with Laplacian-eigenfunction features learned alongside."""

    def __init__(self, model: USFModel, cfg: FBConfig, seed: int = 0):
        super().__init__(model, cfg, seed)
        self.phi_opt = torch.optim.Adam(model.phi_net.parameters(), lr=cfg.feature_lr, betas=cfg.betas)

    def core_loss(self, batch, z):
        m = self.model
        loss = usf_td_loss(m, batch["obs"], batch["actions"], batch["next_obs"], z)
        f_all = m.psi_net(batch["obs"], z)
        f_sa = f_all[torch.arange(len(batch["actions"])), batch["actions"]]
        return loss, FBLossParts(loss, f_sa, f_all, None, None, None)

    def update(self, batch):
        m, cfg = self.model, self.cfg
        perm = torch.randperm(len(batch["obs"]), generator=self.generator)
        phi_loss = laplacian_feature_loss(
            m.phi_net(batch["obs"]),
            m.phi_net(batch["next_obs"]),
            m.phi_net(batch["obs"]),
            m.phi_net(batch["plus_obs"][perm]),
            cfg.laplacian_lambda,
        )
        self.phi_opt.zero_grad(set_to_none=True)
        phi_loss.backward()
        self.phi_opt.step()
        out = super().update(batch)
        out["feature_loss"] = phi_loss.item()
        return out


# ---------------------------------------------------------------------------
# acting


def to_tensor(x) -> Tensor:
    return torch.as_tensor(np.asarray(x, np.float32))


@torch.no_grad()
def greedy_action(model, obs: np.ndarray, z: Tensor) -> int:
    o = to_tensor(obs)[None]
    return int(model.greedy_actions(o, z.to(o.dtype)[None])[0])


@torch.no_grad()
def greedy_policy_table(model, state_obs: np.ndarray, z: Tensor) -> np.ndarray:
    """One-hot ``(n_states, n_actions)`` table of greedy actions at noiseless state observations."""
    o = to_tensor(state_obs)
    zz = z.to(o.dtype)[None].expand(len(o), -1)
    q = model.Q(o, zz)
    table = np.zeros(tuple(q.shape))
    table[np.arange(len(o)), q.argmax(-1).numpy()] = 1.0
    return table


def rollout(env, act: Callable[[np.ndarray], int], reward: np.ndarray, rng: np.random.Generator, max_steps: Optional[int] = None) -> float:
    """Undiscounted episode return with reward collected on arrival."""
    steps = env.horizon if max_steps is None else max_steps
    if steps <= 0:
        return 0.0
    s = env.reset(rng)
    total = 0.0
    for _ in range(steps):
        a = act(env.observe(s, rng).vector)
        s, terminal = env.step(s, a, rng)
        total += float(reward[s])
        if terminal:
            break
    return total
