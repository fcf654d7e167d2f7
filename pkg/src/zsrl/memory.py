"""FB with memory: F, B and the policy condition on recurrent summaries of observation-action windows.

Each of ``F``, ``B`` and the policy owns a separate memory model.  A training
window holds ``L + 1`` observations; ``tau`` is its first ``L`` steps (ending at
``o_t``) and ``tau'`` its last ``L`` (ending at ``o_{t+1}``).  Both are encoded
from a zero hidden state.  Step ``k`` feeds ``encode([o_k, onehot(a_{k-1})])``;
padded steps feed an exact zero vector.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .data import Dataset, WindowArrays, window_arrays
from .fb import (
    ActorNet,
    FBConfig,
    ForwardNet,
    TrainLog,
    fb_loss_from_embeddings,
    orthonormality_loss,
    project_sphere,
)
from .nets import MLP, MLPSpec, gru_step, init_gru_params, polyak_update, seed_generator

Tensor = torch.Tensor

MEMORY_KINDS = ("gru", "identity", "stack")
STACK_FRAMES = 4


@dataclass(frozen=True)
class MemoryConfig:
    kind: str = "gru"
    context_length: int = 32
    context_length_b: Optional[int] = None
    encoder_width: int = 64
    hidden: int = 64

    def __post_init__(self):
        if self.kind not in MEMORY_KINDS:
            raise ValueError(f"memory kind must be one of {MEMORY_KINDS}")
        if self.context_length < 1 or (self.context_length_b is not None and self.context_length_b < 1):
            raise ValueError("context length must be at least 1")

    @property
    def length_b(self) -> int:
        return self.context_length if self.context_length_b is None else self.context_length_b


def onehot_prev(prev_actions: Tensor, n_actions: int) -> Tensor:
    """One-hot previous actions; ``-1`` (no previous action) maps to zeros."""
    return (prev_actions[..., None] == torch.arange(n_actions)).to(torch.get_default_dtype())


class GRUMemory(nn.Module):
    def __init__(self, obs_dim: int, n_actions: int, cfg: MemoryConfig, generator=None):
        super().__init__()
        self.n_actions = n_actions
        self.out_dim = cfg.hidden
        self.encoder = MLP(MLPSpec(obs_dim + n_actions, (), cfg.encoder_width, output_activation="tanh"), generator)
        self.gru = nn.ParameterDict(
            {k: nn.Parameter(v) for k, v in init_gru_params(cfg.encoder_width, cfg.hidden, generator).items()}
        )

    def embed(self, obs: Tensor, prev_actions: Tensor, pad: Tensor) -> Tensor:
        x = self.encoder(torch.cat([obs, onehot_prev(prev_actions, self.n_actions).to(obs.dtype)], -1))
        return x * (~pad)[..., None].to(x.dtype)

    def initial(self, n: int, dtype=torch.float32) -> Tensor:
        return torch.zeros(n, self.out_dim, dtype=dtype)

    def step(self, h: Tensor, obs: Tensor, prev_actions: Tensor, pad: Tensor) -> Tuple[Tensor, Tensor]:
        h = gru_step(self.gru, self.embed(obs, prev_actions, pad), h)
        return h, h

    def encode(self, obs_seq: Tensor, prev_actions: Tensor, pad: Tensor) -> Tensor:
        """Hidden state after folding the whole ``[N, T, ...]`` sequence from zero."""
        x = self.embed(obs_seq, prev_actions, pad)
        h = self.initial(obs_seq.shape[0], x.dtype)
        for k in range(obs_seq.shape[1]):
            h = gru_step(self.gru, x[:, k], h)
        return h


class IdentityMemory(nn.Module):
    """Pass-through: the summary is the latest observation."""

    def __init__(self, obs_dim: int, *_, **__):
        super().__init__()
        self.out_dim = obs_dim

    def initial(self, n: int, dtype=torch.float32) -> Tensor:
        return torch.zeros(n, self.out_dim, dtype=dtype)

    def step(self, h, obs, prev_actions, pad):
        out = obs * (~pad)[..., None].to(obs.dtype)
        return out, out

    def encode(self, obs_seq, prev_actions, pad) -> Tensor:
        return obs_seq[:, -1] * (~pad[:, -1])[..., None].to(obs_seq.dtype)


class StackMemory(nn.Module):
    """Concatenation of the last four observations (oldest first), zero where missing."""

    def __init__(self, obs_dim: int, *_, **__):
        super().__init__()
        self.obs_dim = obs_dim
        self.out_dim = STACK_FRAMES * obs_dim

    def initial(self, n: int, dtype=torch.float32) -> Tensor:
        return torch.zeros(n, self.out_dim, dtype=dtype)

    def step(self, h, obs, prev_actions, pad):
        obs = obs * (~pad)[..., None].to(obs.dtype)
        h = torch.cat([h[:, self.obs_dim :], obs], -1)
        return h, h

    def encode(self, obs_seq, prev_actions, pad) -> Tensor:
        obs = obs_seq * (~pad)[..., None].to(obs_seq.dtype)
        n, t, d = obs.shape
        if t < STACK_FRAMES:
            obs = torch.cat([obs.new_zeros(n, STACK_FRAMES - t, d), obs], 1)
        return obs[:, -STACK_FRAMES:].reshape(n, -1)


_MEMORIES = {"gru": GRUMemory, "identity": IdentityMemory, "stack": StackMemory}


def build_memory(obs_dim: int, n_actions: int, cfg: MemoryConfig, generator=None) -> nn.Module:
    return _MEMORIES[cfg.kind](obs_dim, n_actions, cfg, generator)


def encode_window(memory: nn.Module, obs_seq: Tensor, act_seq: Tensor, pad: Tensor) -> Tensor:
    """Encode ``T`` observations with the ``T - 1`` actions between them.

    ``act_seq[k]`` is the action taken after ``obs_seq[k]``; step ``k`` is
    paired with ``act_seq[k - 1]`` and the first step with no action.
    """
    n = obs_seq.shape[0]
    prev = torch.cat([torch.full((n, 1), -1, dtype=torch.long), act_seq[:, : obs_seq.shape[1] - 1]], 1)
    return memory.encode(obs_seq, prev, pad)


# ---------------------------------------------------------------------------
# model


class FBMModel(nn.Module):
    def __init__(self, obs_dim: int, n_actions: int, cfg: FBConfig, mcfg: MemoryConfig, seed: int = 0):
        super().__init__()
        g = seed_generator(seed)
        self.mcfg = mcfg
        self.z_dim, self.gamma = cfg.z_dim, cfg.gamma
        self.n_actions = n_actions
        self.mem_f = build_memory(obs_dim, n_actions, mcfg, g)
        self.mem_b = build_memory(obs_dim, n_actions, mcfg, g)
        self.mem_pi = build_memory(obs_dim, n_actions, mcfg, g)
        self.forward_net = ForwardNet(self.mem_f.out_dim, n_actions, cfg.z_dim, cfg, g)
        self.backward_net = MLP(MLPSpec(self.mem_b.out_dim, cfg.backward_hidden, cfg.z_dim), g)
        self.actor = ActorNet(self.mem_pi.out_dim, n_actions, cfg, g)
        self.mem_f_target = copy.deepcopy(self.mem_f).requires_grad_(False)
        self.mem_b_target = copy.deepcopy(self.mem_b).requires_grad_(False)
        self.forward_target = copy.deepcopy(self.forward_net).requires_grad_(False)
        self.backward_target = copy.deepcopy(self.backward_net).requires_grad_(False)

    @property
    def L(self) -> int:
        return self.mcfg.context_length

    @property
    def L_b(self) -> int:
        return self.mcfg.length_b

    # window views: obs [N, L+1, D]; tau = steps 0..L-1, tau' = steps 1..L
    def _tau(self, w, memory, length: int, nxt: bool):
        obs, act, pad = w["obs"], w["actions"], w["pad"]
        end = obs.shape[1] if nxt else obs.shape[1] - 1
        start = max(end - length, 0)
        return encode_window(memory, obs[:, start:end], act[:, start : end - 1], pad[:, start:end])

    def B_windows(self, w, target: bool = False) -> Tensor:
        """``B`` of the summary of each window's last ``L_B`` steps (ending at the arrival observation)."""
        if target:
            return self.backward_target(self._tau(w, self.mem_b_target, self.L_b, True))
        return self.backward_net(self._tau(w, self.mem_b, self.L_b, True))

    def fb_parameters(self):
        mods = (self.forward_net, self.backward_net, self.mem_f, self.mem_b)
        return [p for m in mods for p in m.parameters()]

    def actor_parameters(self):
        return list(self.actor.parameters()) + list(self.mem_pi.parameters())

    def update_targets(self, nu: float) -> None:
        polyak_update(self.forward_target, self.forward_net, nu)
        polyak_update(self.backward_target, self.backward_net, nu)
        if any(True for _ in self.mem_f.parameters()):
            polyak_update(self.mem_f_target, self.mem_f, nu)
            polyak_update(self.mem_b_target, self.mem_b, nu)


def fbm_td_loss_parts(model: FBMModel, w: Dict[str, Tensor], w_plus: Dict[str, Tensor], z: Tensor):
    """FB loss with ``F(f_F(tau))``, ``B(f_B(tau'))``, ``B(f_B(tau+))`` and ``pi(f_pi(tau'))``.

    Returns ``(loss, b_plus, f_all, f_sa)``.
    """
    L = model.L
    h_f = model._tau(w, model.mem_f, L, False)
    f_all = model.forward_net(h_f, z)
    a_t = w["actions"][:, -1]
    f_sa = f_all[torch.arange(len(a_t)), a_t]
    with torch.no_grad():
        probs = torch.softmax(model.actor(model._tau(w, model.mem_pi, L, True), z), -1)
        f_next = model.forward_target(model._tau(w, model.mem_f_target, L, True), z)
        target_f_next = (probs[..., None] * f_next).sum(1)
        target_b_plus = model.B_windows(w_plus, target=True)
    b_next = model.B_windows(w)
    b_plus = model.B_windows(w_plus)
    loss, _ = fb_loss_from_embeddings(f_sa, b_plus, target_f_next, target_b_plus, b_next, model.gamma)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite FB-M loss")
    return loss, b_plus, f_all, f_sa


def fbm_td_loss(model: FBMModel, w, w_plus, z) -> Tensor:
    return fbm_td_loss_parts(model, w, w_plus, z)[0]


@torch.no_grad()
def infer_task_fbm(model: FBMModel, obs_seq, act_seq, pad, rewards) -> Tensor:
    """``z = mean r B(f_B(tau))`` over reward-labelled windows ending at the rewarded observation."""
    rewards = torch.as_tensor(np.asarray(rewards), dtype=torch.get_default_dtype())
    if rewards.numel() == 0:
        raise ValueError("need at least one labelled window")
    w = {"obs": torch.as_tensor(obs_seq), "actions": torch.as_tensor(act_seq), "pad": torch.as_tensor(pad)}
    b = model.B_windows(w)
    return (rewards[:, None] * b).mean(0)


# ---------------------------------------------------------------------------
# training


class WindowBatches:
    def __init__(self, arrays: WindowArrays, generator: torch.Generator):
        self.obs = torch.from_numpy(arrays.obs)
        self.actions = torch.from_numpy(arrays.actions)
        self.pad = torch.from_numpy(arrays.pad)
        self.n = len(arrays)
        self.generator = generator

    def take(self, idx: Tensor) -> Dict[str, Tensor]:
        return {"obs": self.obs[idx], "actions": self.actions[idx], "pad": self.pad[idx]}

    def sample(self, size: int):
        i = torch.randint(self.n, (size,), generator=self.generator)
        j = torch.randint(self.n, (size,), generator=self.generator)
        return self.take(i), self.take(j)


class FBMAgent:
    def __init__(self, model: FBMModel, cfg: FBConfig, seed: int = 0):
        self.model, self.cfg = model, cfg
        self.generator = seed_generator(seed + 1)
        self.fb_opt = torch.optim.Adam(model.fb_parameters(), lr=cfg.lr, betas=cfg.betas)
        self.actor_opt = torch.optim.Adam(model.actor_parameters(), lr=cfg.actor_lr, betas=cfg.betas)
        self.step = 0

    def sample_z(self, w_plus) -> Tensor:
        m, n = self.model, w_plus["obs"].shape[0]
        z = project_sphere(torch.randn(n, m.z_dim, generator=self.generator))
        from_b = torch.rand(n, generator=self.generator) < self.cfg.z_mix
        perm = torch.randperm(n, generator=self.generator)
        with torch.no_grad():
            zb = project_sphere(m.B_windows({k: v[perm] for k, v in w_plus.items()}))
        return torch.where(from_b[:, None], zb, z)

    def update(self, w, w_plus) -> Dict[str, float]:
        m, cfg = self.model, self.cfg
        z = self.sample_z(w_plus)
        loss, b_plus, _, f_sa = fbm_td_loss_parts(m, w, w_plus, z)
        total = loss + cfg.ortho_coef * orthonormality_loss(b_plus) if cfg.ortho_coef else loss
        if not torch.isfinite(total):
            raise FloatingPointError(f"divergence at step {self.step}")
        self.fb_opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            for p in m.fb_parameters():
                if p.grad is not None:
                    p.grad.data.clamp_(-cfg.grad_clip, cfg.grad_clip)
        self.fb_opt.step()

        with torch.no_grad():
            q = torch.einsum("nad,nd->na", m.forward_net(m._tau(w, m.mem_f, m.L, False), z), z)
        probs = torch.softmax(m.actor(m._tau(w, m.mem_pi, m.L, False), z), -1)
        a_loss = -(probs * q).sum(-1).mean()
        self.actor_opt.zero_grad(set_to_none=True)
        a_loss.backward()
        self.actor_opt.step()

        m.update_targets(cfg.polyak)
        self.step += 1
        return {"fb_loss": loss.item(), "actor_loss": a_loss.item(), "mean_q": (f_sa * z).sum(-1).mean().item()}

    def train(self, dataset: Dataset, steps: int, log_every: int = 100, callback=None, log: Optional[TrainLog] = None) -> TrainLog:
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        log = log if log is not None else TrainLog()
        L = max(self.model.L, self.model.L_b)
        batches = WindowBatches(window_arrays(dataset, L), self.generator)
        for _ in range(steps):
            metrics = self.update(*batches.sample(self.cfg.batch_size))
            if self.step % log_every == 0:
                log.add(self.step, metrics)
            if callback is not None:
                callback(self.step)
        return log


# ---------------------------------------------------------------------------
# acting


class MemoryPolicy:
    """Greedy recurrent controller: ``argmax_a F(h_F, a, z)^T z`` with ``h_F`` carried across the episode.

    The hidden state starts at zero and first absorbs ``L - 1`` padded steps so
    the opening steps look like the left-padded windows seen in training.
    """

    def __init__(self, model: FBMModel, z: Tensor):
        self.model = model
        self.z = z.to(torch.get_default_dtype())[None]
        self.reset()

    @torch.no_grad()
    def reset(self):
        m = self.model
        self.h = m.mem_f.initial(1)
        self.prev = torch.tensor([-1])
        pad = torch.tensor([True])
        zero = torch.zeros(1, self._obs_dim())
        for _ in range(m.L - 1):
            self.h, _ = m.mem_f.step(self.h, zero, self.prev, pad)

    def _obs_dim(self) -> int:
        m = self.model.mem_f
        if isinstance(m, GRUMemory):
            return m.encoder.spec.in_dim - m.n_actions
        if isinstance(m, StackMemory):
            return m.obs_dim
        return m.out_dim

    @torch.no_grad()
    def __call__(self, obs: np.ndarray) -> int:
        m = self.model
        o = torch.as_tensor(np.asarray(obs, np.float32))[None]
        self.h, out = m.mem_f.step(self.h, o, self.prev, torch.tensor([False]))
        q = torch.einsum("nad,nd->na", m.forward_net(out, self.z), self.z)
        a = int(q.argmax(-1)[0])
        self.prev = torch.tensor([a])
        return a


def rollout_with_memory(model: FBMModel, env, z: Tensor, reward: np.ndarray, rng: np.random.Generator, max_steps: Optional[int] = None) -> float:
    """Undiscounted return of the greedy recurrent policy over one episode."""
    steps = env.horizon if max_steps is None else max_steps
    if steps <= 0:
        return 0.0
    policy = MemoryPolicy(model, z)
    s = env.reset(rng)
    total = 0.0
    for _ in range(steps):
        a = policy(env.observe(s, rng).vector)
        s, terminal = env.step(s, a, rng)
        total += float(reward[s])
        if terminal:
            break
    return total

