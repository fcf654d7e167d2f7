"""Finite MDPs, grid layouts and observation wrappers.

Every environment in the package is a tabular MDP whose states are grid cells.
Agents never see state indices directly; they receive a continuous observation
vector (normalised ``(x, y)`` coordinates) which may be corrupted by the noisy
or flickering wrappers to produce a POMDP.

Actions on grid layouts::

    0 = right (+x)    1 = left (-x)    2 = up (+y)    3 = down (-y)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Optional, Tuple

import numpy as np

RIGHT, LEFT, UP, DOWN = 0, 1, 2, 3
ACTION_NAMES = ("right", "left", "up", "down")
_MOVES = {RIGHT: (1, 0), LEFT: (-1, 0), UP: (0, 1), DOWN: (0, -1)}
_LATERAL = {RIGHT: (UP, DOWN), LEFT: (UP, DOWN), UP: (RIGHT, LEFT), DOWN: (RIGHT, LEFT)}

DEFAULT_SIGMA_NOISE = 0.2
DEFAULT_P_FLICKER = 0.2
TRAIN_DYNAMICS_SCALES = (0.5, 1.5)
TEST_DYNAMICS_SCALES = (1.0, 2.0)


@dataclass(frozen=True)
class FiniteMDP:
    """Reward-free tabular MDP with row-stochastic ``transition[s, a, s']``."""

    transition: np.ndarray
    start_dist: np.ndarray
    gamma: float
    terminal_mask: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        rho = np.asarray(self.start_dist, dtype=np.float64)
        if rho.shape != (p.shape[0],) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise ValueError("start_dist must be a probability vector over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        term = np.asarray(self.terminal_mask, dtype=bool)
        if term.shape != (p.shape[0],):
            raise ValueError("terminal_mask must have one entry per state")
        p.setflags(write=False)
        rho.setflags(write=False)
        term.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "start_dist", rho)
        object.__setattr__(self, "terminal_mask", term)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class Observation:
    vector: np.ndarray
    dropped: bool = False


@dataclass(frozen=True)
class DynamicsContext:
    mass_scale: float = 1.0
    damping_scale: float = 1.0

    def __post_init__(self):
        if not (self.mass_scale > 0 and self.damping_scale > 0):
            raise ValueError("dynamics scales must be positive")

    @property
    def is_identity(self) -> bool:
        return self.mass_scale == 1.0 and self.damping_scale == 1.0


def reset(env: FiniteMDP, seed: int) -> int:
    """Sample a start state from ``env.start_dist``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return int(rng.choice(env.n_states, p=env.start_dist))


def step(env: FiniteMDP, state: int, action: int, rng: np.random.Generator) -> Tuple[int, bool]:
    if not 0 <= action < env.n_actions:
        raise ValueError(f"action {action} out of range for {env.n_actions} actions")
    row = env.transition[state, action]
    # inverse-cdf sampling: one uniform per step keeps rng consumption fixed
    nxt = int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right"))
    nxt = min(nxt, env.n_states - 1)
    return nxt, bool(env.terminal_mask[nxt])


def wrap_noisy(obs: Observation, sigma_noise: float, rng: np.random.Generator) -> Observation:
    """Add isotropic zero-mean Gaussian noise whose *variance* is ``sigma_noise``."""
    if sigma_noise < 0:
        raise ValueError("sigma_noise must be non-negative")
    if sigma_noise == 0:
        return obs
    noise = rng.normal(0.0, np.sqrt(sigma_noise), size=obs.vector.shape)
    return Observation(obs.vector + noise, obs.dropped)


def wrap_flicker(obs: Observation, p_flick: float, rng: np.random.Generator) -> Observation:
    if not 0.0 <= p_flick <= 1.0:
        raise ValueError("p_flick must be a probability")
    if p_flick == 0:
        return obs
    if rng.random() < p_flick:
        return Observation(np.zeros_like(obs.vector), True)
    return obs


# ---------------------------------------------------------------------------
# grid layouts


@dataclass(frozen=True)
class GridLayout:
    """Parametric grid world; ``walls`` holds blocked edges as ((x, y), action)."""

    width: int
    height: int
    walls: FrozenSet[Tuple[Tuple[int, int], int]] = frozenset()
    slip: float = 0.0
    step_magnitude: float = 1.0
    start: Optional[Tuple[int, int]] = None
    gamma: float = 0.98

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def index(self, x: int, y: int) -> int:
        return y * self.width + x

    def coords(self, s: int) -> Tuple[int, int]:
        return s % self.width, s // self.width

    def blocked(self, x: int, y: int, action: int) -> bool:
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height):
            return True
        return ((x, y), action) in self.walls

    def move(self, x: int, y: int, action: int, cells: int) -> int:
        for _ in range(cells):
            if self.blocked(x, y, action):
                break
            dx, dy = _MOVES[action]
            x, y = x + dx, y + dy
        return self.index(x, y)


def _edge_wall(x: int, y: int, action: int):
    """Both directed halves of the wall on the given side of cell (x, y)."""
    dx, dy = _MOVES[action]
    back = {RIGHT: LEFT, LEFT: RIGHT, UP: DOWN, DOWN: UP}[action]
    return {((x, y), action), ((x + dx, y + dy), back)}


def build_mdp(layout: GridLayout) -> FiniteMDP:
    """Tabulate a layout.

    The intended direction is taken with probability ``1 - slip``; each lateral
    direction with ``slip / 2``.  A move of magnitude ``k`` advances ``floor(k)``
    cells plus one more cell with probability ``k - floor(k)``; moves stop at walls.
    """
    if not 0.0 <= layout.slip <= 1.0:
        raise ValueError(f"slip probability {layout.slip} outside [0, 1]")
    if layout.step_magnitude <= 0:
        raise ValueError("step magnitude must be positive")
    n = layout.n_states
    p = np.zeros((n, 4, n))
    whole = int(np.floor(layout.step_magnitude))
    frac = layout.step_magnitude - whole
    cells_dist = [(whole, 1.0 - frac)] + ([(whole + 1, frac)] if frac > 0 else [])
    for s in range(n):
        x, y = layout.coords(s)
        for a in range(4):
            lat1, lat2 = _LATERAL[a]
            for direction, w in ((a, 1.0 - layout.slip), (lat1, layout.slip / 2), (lat2, layout.slip / 2)):
                if w == 0:
                    continue
                for cells, wc in cells_dist:
                    if wc == 0:
                        continue
                    p[s, a, layout.move(x, y, direction, cells)] += w * wc
    if layout.start is None:
        rho = np.full(n, 1.0 / n)
    else:
        rho = np.zeros(n)
        rho[layout.index(*layout.start)] = 1.0
    return FiniteMDP(p, rho, layout.gamma, np.zeros(n, dtype=bool))


def grid5_layout() -> GridLayout:
    return GridLayout(5, 5, gamma=0.98)


def maze10_layout() -> GridLayout:
    """10x10 four-room maze; rooms are joined by one-cell doorways."""
    walls = set()
    for y in range(10):
        if y not in (2, 7):
            walls |= _edge_wall(4, y, RIGHT)
    for x in range(10):
        if x not in (2, 7):
            walls |= _edge_wall(x, 4, UP)
    return GridLayout(10, 10, frozenset(walls), slip=0.1, start=(0, 9), gamma=0.99)


def scaled_layout(layout: GridLayout, ctx: DynamicsContext) -> GridLayout:
    """Mass scales step magnitude by ``1 / mass``; damping scales the slip probability."""
    if ctx.is_identity:
        return layout
    slip = layout.slip * ctx.damping_scale
    if slip > 1.0:
        raise ValueError(
            f"damping scale {ctx.damping_scale} gives slip {slip} > 1 (negative move probability)"
        )
    return replace(layout, slip=slip, step_magnitude=layout.step_magnitude / ctx.mass_scale)


# ---------------------------------------------------------------------------
# environments seen by agents


@dataclass(frozen=True)
class Env:
    """A layout plus observation model; immutable and safe to share."""

    env_id: str
    layout: GridLayout
    mdp: FiniteMDP = field(repr=False)
    sigma_noise: float = 0.0
    p_flicker: float = 0.0
    horizon: int = 100

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    @property
    def fully_observed(self) -> bool:
        return self.sigma_noise == 0 and self.p_flicker == 0

    def state_vector(self, s) -> np.ndarray:
        """Normalised coordinates in (0, 1]; no cell maps to the all-zero dropped vector."""
        s = np.asarray(s)
        x = s % self.layout.width
        y = s // self.layout.width
        return np.stack([(x + 1) / self.layout.width, (y + 1) / self.layout.height], -1).astype(
            np.float32
        )

    def state_table(self) -> np.ndarray:
        return self.state_vector(np.arange(self.n_states))

    def observe(self, s: int, rng: np.random.Generator) -> Observation:
        obs = Observation(self.state_vector(s).astype(np.float64))
        obs = wrap_noisy(obs, self.sigma_noise, rng)
        obs = wrap_flicker(obs, self.p_flicker, rng)
        return Observation(obs.vector.astype(np.float32), obs.dropped)

    def reset(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.mdp.start_dist))

    def step(self, s: int, a: int, rng: np.random.Generator) -> Tuple[int, bool]:
        return step(self.mdp, s, a, rng)


def apply_dynamics_context(env, ctx: DynamicsContext):
    """Rescale dynamics of an :class:`Env` (or return ``env`` itself for the identity)."""
    if ctx.is_identity:
        return env
    if not isinstance(env, Env):
        raise TypeError("dynamics contexts need a grid layout; got a bare FiniteMDP")
    layout = scaled_layout(env.layout, ctx)
    return replace(env, layout=layout, mdp=build_mdp(layout))


_BASE = {"grid5": grid5_layout, "maze10": maze10_layout}
_SUFFIX = re.compile(r"-(noisy|flicker|dyn(?P<scale>[0-9]*\.?[0-9]+))")


def make_env(env_id: str, horizon: int = 100) -> Env:
    """Build an environment from ids like ``grid5``, ``maze10-noisy`` or ``grid5-flicker-dyn2.0``."""
    base, _, rest = env_id.partition("-")
    if base not in _BASE:
        raise KeyError(f"unknown environment {env_id!r}; base ids are {sorted(_BASE)}")
    rest = "-" + rest if rest else ""
    layout = _BASE[base]()
    sigma, flick, ctx = 0.0, 0.0, DynamicsContext()
    pos = 0
    while pos < len(rest):
        m = _SUFFIX.match(rest, pos)
        if m is None:
            raise KeyError(f"bad environment suffix in {env_id!r}")
        if m.group(1) == "noisy":
            sigma = DEFAULT_SIGMA_NOISE
        elif m.group(1) == "flicker":
            flick = DEFAULT_P_FLICKER
        else:
            scale = float(m.group("scale"))
            ctx = DynamicsContext(scale, scale)
        pos = m.end()
    layout = scaled_layout(layout, ctx)
    return Env(env_id, layout, build_mdp(layout), sigma, flick, horizon)


def registered_env_ids():
    return tuple(_BASE)


# ---------------------------------------------------------------------------
# goal-reaching tasks (reward 1 on arrival at the goal cell)

_TASKS = {
    "grid5": {
        "reach_top_right": (4, 4),
        "reach_top_left": (0, 4),
        "reach_bottom_right": (4, 0),
        "reach_centre": (2, 2),
    },
    "maze10": {
        "reach_top_right": (8, 8),
        "reach_bottom_right": (8, 1),
        "reach_bottom_left": (1, 1),
        "reach_centre": (5, 5),
    },
}


def goal_reward(env: Env, cell: Tuple[int, int]) -> np.ndarray:
    r = np.zeros(env.n_states)
    r[env.layout.index(*cell)] = 1.0
    return r


def env_tasks(env: Env) -> dict:
    """Task name -> reward vector over states for the environment's base layout."""
    base = env.env_id.partition("-")[0]
    return {name: goal_reward(env, cell) for name, cell in _TASKS[base].items()}


def task_goal(env: Env, name: str) -> int:
    base = env.env_id.partition("-")[0]
    return env.layout.index(*_TASKS[base][name])
