"""Conservative penalties on FB / USF value and measure estimates, with Lagrangian alpha tuning.

The maximum over actions is approximated by a logsumexp over a candidate set
built per state: ``n_ood`` uniform actions, ``n_actor`` policy actions at ``s``,
``n_actor`` policy actions at ``s'`` (scored at ``s'``) and the dataset action
repeated ``n_actor`` times.  No importance weights are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from .fb import FBAgent, FBConfig, USFAgent, project_sphere

Tensor = torch.Tensor

VARIANTS = ("VC", "MC", "DVC", "VCSF")


@dataclass(frozen=True)
class ConservativeConfig:
    variant: str = "VC"
    budget_tau: float = 50.0
    n_ood: int = 3
    n_actor: int = 3
    alpha_init: float = 1e-2
    alpha_bounds: Tuple[float, float] = (0.0, 1e6)
    alpha_lr: float = 1e-4
    fixed_alpha: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not math.isfinite(self.budget_tau):
            raise ValueError("budget_tau must be finite")
        if self.n_ood < 1 or self.n_actor < 1:
            raise ValueError("sample counts must be at least 1")

    @property
    def n_total(self) -> int:
        return self.n_ood + 3 * self.n_actor


# ---------------------------------------------------------------------------
# candidate actions and the logsumexp estimate


def logsumexp_estimate(scores: Tensor) -> Tensor:
    """Logsumexp over the leading candidate axis (max-subtracted internally)."""
    return torch.logsumexp(scores, dim=0)


@torch.no_grad()
def sample_candidate_actions(model, obs: Tensor, next_obs: Tensor, z: Tensor, cfg: ConservativeConfig, generator: torch.Generator):
    """``(ood [n_ood, N], actor_s [n_actor, N], actor_next [n_actor, N])`` action indices."""
    n = obs.shape[0]
    n_actions = model.F(obs[:1], z[:1]).shape[1]
    ood = torch.randint(n_actions, (cfg.n_ood, n), generator=generator)
    p_s = model.policy_probs(obs, z)
    p_next = model.policy_probs(next_obs, z)
    actor_s = torch.multinomial(p_s, cfg.n_actor, replacement=True, generator=generator).T
    actor_next = torch.multinomial(p_next, cfg.n_actor, replacement=True, generator=generator).T
    return ood, actor_s, actor_next


def candidate_embeddings(f_s: Tensor, f_next: Tensor, actions: Tensor, cands, n_actor: int) -> Tensor:
    """Stack ``F`` rows for every candidate: ``[n_total, N, d]``."""
    ood, actor_s, actor_next = cands
    rows = torch.arange(f_s.shape[0])
    parts = [
        f_s[rows, ood],
        f_s[rows, actor_s],
        f_next[rows, actor_next],
        f_s[rows, actions].expand(n_actor, -1, -1),
    ]
    return torch.cat(parts, 0)


def _forward_pair(model, obs, next_obs, z, f_s: Optional[Tensor]):
    if f_s is None:
        f_s = model.F(obs, z)
    return f_s, model.F(next_obs, z)


def max_value_estimate(model, obs, actions, next_obs, z, cfg: ConservativeConfig, generator, f_s=None) -> Tensor:
    """Per-sample logsumexp of ``F(., a, z)^T z`` over the candidate set: ``[N]``."""
    cands = sample_candidate_actions(model, obs, next_obs, z, cfg, generator)
    f_s, f_next = _forward_pair(model, obs, next_obs, z, f_s)
    emb = candidate_embeddings(f_s, f_next, actions, cands, cfg.n_actor)
    q = torch.einsum("cnd,nd->cn", emb, z)
    return logsumexp_estimate(q)


def vc_penalty(model, batch: Dict[str, Tensor], z: Tensor, cfg: ConservativeConfig, generator, f_s=None) -> Tensor:
    """``mean_s logsumexp_a Q(s, a) - mean_(s,a)~D Q(s, a)`` with ``Q = F^T z``."""
    obs, actions = batch["obs"], batch["actions"]
    if f_s is None:
        f_s = model.F(obs, z)
    lse = max_value_estimate(model, obs, actions, batch["next_obs"], z, cfg, generator, f_s)
    q_data = (f_s[torch.arange(len(actions)), actions] * z).sum(-1)
    return lse.mean() - q_data.mean()


def mc_penalty(model, batch: Dict[str, Tensor], z: Tensor, cfg: ConservativeConfig, generator, f_s=None, b_plus=None) -> Tensor:
    """Same candidate construction scored by measures ``F(s, a, z)^T B(s+)`` for every ``(s, s+)`` pair."""
    obs, actions, next_obs = batch["obs"], batch["actions"], batch["next_obs"]
    cands = sample_candidate_actions(model, obs, next_obs, z, cfg, generator)
    f_s, f_next = _forward_pair(model, obs, next_obs, z, f_s)
    if b_plus is None:
        b_plus = model.B(batch["plus_obs"])
    emb = candidate_embeddings(f_s, f_next, actions, cands, cfg.n_actor)
    measures = torch.einsum("cnd,jd->cnj", emb, b_plus)
    data = f_s[torch.arange(len(actions)), actions] @ b_plus.T
    return logsumexp_estimate(measures).mean() - data.mean()


def directed_z(model, goal_obs: Tensor) -> Tensor:
    """Task vectors ``B(s_g)`` projected onto the sqrt(d)-sphere, held fixed."""
    with torch.no_grad():
        return project_sphere(model.B(goal_obs))


def dvc_penalty(model, batch: Dict[str, Tensor], cfg: ConservativeConfig, generator, goal_obs: Optional[Tensor] = None) -> Tensor:
    """VC penalty with every ``z`` replaced by a goal embedding ``B(s_g)``, ``s_g`` drawn from the data."""
    if goal_obs is None:
        perm = torch.randperm(len(batch["plus_obs"]), generator=generator)
        goal_obs = batch["plus_obs"][perm]
    z = directed_z(model, goal_obs)
    return vc_penalty(model, batch, z, cfg, generator)


# ---------------------------------------------------------------------------
# alpha tuning


class AlphaState(nn.Module):
    """``log_alpha`` and its own Adam optimiser."""

    def __init__(self, cfg: ConservativeConfig, betas=(0.9, 0.999)):
        super().__init__()
        self.cfg = cfg
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.alpha_init), dtype=torch.float64))
        self.opt = torch.optim.Adam([self.log_alpha], lr=cfg.alpha_lr, betas=betas)

    @property
    def alpha(self) -> Tensor:
        lo, hi = self.cfg.alpha_bounds
        return torch.clamp(self.log_alpha.exp(), lo, hi)


def tune_alpha(state: AlphaState, penalty: Tensor, cfg: ConservativeConfig) -> Tuple[Tensor, Tensor]:
    """One dual step on ``-0.5 alpha (penalty - tau)``; returns ``(alpha, alpha * penalty)``.

    ``alpha`` is detached, so the weighted penalty only trains the representation.
    """
    if not torch.isfinite(penalty):
        raise FloatingPointError("non-finite conservative penalty")
    alpha_loss = -0.5 * state.alpha * (penalty.detach().to(state.log_alpha.dtype) - cfg.budget_tau)
    state.opt.zero_grad(set_to_none=True)
    alpha_loss.backward()
    state.opt.step()
    alpha = state.alpha.detach()
    return alpha, alpha.to(penalty.dtype) * penalty


# ---------------------------------------------------------------------------
# agents


class _ConservativeMixin:
    ccfg: ConservativeConfig

    def _init_conservative(self, ccfg: ConservativeConfig):
        self.ccfg = ccfg
        self.alpha_state = AlphaState(ccfg, self.cfg.betas)

    def penalty(self, batch, z, parts) -> Tensor:
        c, m, g = self.ccfg, self.model, self.aux_generator
        if c.variant in ("VC", "VCSF"):
            return vc_penalty(m, batch, z, c, g, parts.f_all)
        if c.variant == "MC":
            return mc_penalty(m, batch, z, c, g, parts.f_all, parts.b_plus)
        return dvc_penalty(m, batch, c, g)

    def extra_loss(self, batch, z, parts):
        pen = self.penalty(batch, z, parts)
        if self.ccfg.fixed_alpha is not None:
            alpha = torch.tensor(self.ccfg.fixed_alpha, dtype=pen.dtype)
            weighted = alpha * pen
        else:
            alpha, weighted = tune_alpha(self.alpha_state, pen, self.ccfg)
        return weighted, {"penalty": pen.item(), "alpha": float(alpha)}


class ConservativeFBAgent(_ConservativeMixin, FBAgent):
    """FB with a VC, MC or DVC penalty added to the representation loss."""

    def __init__(self, model, cfg: FBConfig, ccfg: ConservativeConfig, seed: int = 0):
        if ccfg.variant == "VCSF":
            raise ValueError("VCSF needs ConservativeUSFAgent")
        FBAgent.__init__(self, model, cfg, seed)
        self._init_conservative(ccfg)


class ConservativeUSFAgent(_ConservativeMixin, USFAgent):
    def __init__(self, model, cfg: FBConfig, ccfg: ConservativeConfig, seed: int = 0):
        if ccfg.variant != "VCSF":
            raise ValueError("successor features only support the VCSF penalty")
        USFAgent.__init__(self, model, cfg, seed)
        self._init_conservative(ccfg)
