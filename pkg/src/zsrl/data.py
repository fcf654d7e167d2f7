"""Offline datasets: collection, corruption, relabelling, windows and the on-disk format.

On-disk layout (little-endian)::

    magic "ZSRL" | version u32 = 1 | env-id length u16 + UTF-8 bytes | obs_dim u32
    | n_actions u32 | flags u32 (bit0 has_state_ids, bit1 episodic) | count u64
    | count records:
        obs f32[obs_dim] | action u16 | next_obs f32[obs_dim]
        | state_id u32, next_state_id u32 (only if bit0) | done u8

``done`` marks the last transition of an episode (terminal or truncated).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Union

import numpy as np

from .envs import Env

MAGIC = b"ZSRL"
VERSION = 1
FLAG_STATE_IDS = 1
FLAG_EPISODIC = 2
DEFAULT_COLLECTION_SIZE = 100_000
DEFAULT_LABELS = 10_000
DEFAULT_CONTEXT_LENGTH = 32


class DatasetFormatError(ValueError):
    """Raised for files that are not valid datasets (bad magic, version, truncation)."""


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    next_obs: np.ndarray
    state_id: Optional[int] = None
    next_state_id: Optional[int] = None
    done: bool = False


@dataclass(frozen=True)
class TrajectoryWindow:
    """``L + 1`` observations and the ``L`` actions between them, left zero-padded."""

    obs_seq: np.ndarray
    act_seq: np.ndarray
    pad_mask: np.ndarray
    terminal_state_id: Optional[int] = None


@dataclass(frozen=True)
class LabelledSample:
    sample: Union[Transition, TrajectoryWindow]
    reward: float


@dataclass(frozen=True)
class Dataset:
    env_id: str
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    n_actions: int
    state_ids: Optional[np.ndarray] = None
    next_state_ids: Optional[np.ndarray] = None
    episodic: bool = True

    def __post_init__(self):
        n = len(self.actions)
        arrays = {
            "obs": np.ascontiguousarray(self.obs, dtype=np.float32),
            "actions": np.ascontiguousarray(self.actions, dtype=np.int64),
            "next_obs": np.ascontiguousarray(self.next_obs, dtype=np.float32),
            "dones": np.ascontiguousarray(self.dones, dtype=bool),
        }
        if (self.state_ids is None) != (self.next_state_ids is None):
            raise ValueError("state_ids and next_state_ids must be given together")
        if self.state_ids is not None:
            arrays["state_ids"] = np.ascontiguousarray(self.state_ids, dtype=np.int64)
            arrays["next_state_ids"] = np.ascontiguousarray(self.next_state_ids, dtype=np.int64)
        for name, arr in arrays.items():
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.obs.ndim != 2 or self.next_obs.shape != self.obs.shape:
            raise ValueError("obs and next_obs must be (N, obs_dim) arrays of equal shape")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def has_state_ids(self) -> bool:
        return self.state_ids is not None

    def transition(self, i: int) -> Transition:
        return Transition(
            self.obs[i],
            int(self.actions[i]),
            self.next_obs[i],
            None if self.state_ids is None else int(self.state_ids[i]),
            None if self.next_state_ids is None else int(self.next_state_ids[i]),
            bool(self.dones[i]),
        )

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.env_id,
            self.obs[idx],
            self.actions[idx],
            self.next_obs[idx],
            self.dones[idx],
            self.n_actions,
            None if self.state_ids is None else self.state_ids[idx],
            None if self.next_state_ids is None else self.next_state_ids[idx],
            self.episodic,
        )


def concatenate(datasets: List[Dataset], env_id: Optional[str] = None) -> Dataset:
    first = datasets[0]
    ids = all(d.has_state_ids for d in datasets)
    return Dataset(
        env_id or first.env_id,
        np.concatenate([d.obs for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.next_obs for d in datasets]),
        np.concatenate([d.dones for d in datasets]),
        first.n_actions,
        np.concatenate([d.state_ids for d in datasets]) if ids else None,
        np.concatenate([d.next_state_ids for d in datasets]) if ids else None,
        all(d.episodic for d in datasets),
    )


# ---------------------------------------------------------------------------
# collection

BehaviourSpec = Union[str, np.ndarray]


def collect(
    env: Env,
    behaviour: BehaviourSpec,
    n: int,
    seed: int,
    epsilon: float = 0.2,
) -> Dataset:
    """Roll episodes of ``env.horizon`` steps until ``n`` transitions are gathered.

    ``behaviour`` is ``"uniform"``, ``"count-bonus"`` or a fixed
    ``(n_states, n_actions)`` policy table.  ``"count-bonus"`` is an exploratory
    stand-in for RND data: before each episode it plans, by value iteration on
    the empirical transition counts, for the novelty reward
    ``1 / sqrt(1 + visits(s, a))`` (untried pairs are treated as self-loops with
    full bonus), then acts epsilon-greedily on the plan.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    table = None
    if isinstance(behaviour, str):
        if behaviour not in ("uniform", "count-bonus"):
            raise ValueError(f"unknown behaviour {behaviour!r}")
    else:
        table = np.asarray(behaviour, dtype=np.float64)
        if table.shape != (env.n_states, env.n_actions):
            raise ValueError("policy table shape does not match the environment")
    visits = np.zeros((env.n_states, env.n_actions))
    seen = np.zeros((env.n_states, env.n_actions, env.n_states))
    plan = np.zeros((env.n_states, env.n_actions))

    obs = np.empty((n, env.obs_dim), np.float32)
    next_obs = np.empty((n, env.obs_dim), np.float32)
    actions = np.empty(n, np.int64)
    sids = np.empty(n, np.int64)
    nsids = np.empty(n, np.int64)
    dones = np.zeros(n, bool)

    novelty = table is None and behaviour == "count-bonus"
    i = 0
    while i < n:
        if novelty:
            plan = _novelty_plan(seen, visits)
        s = env.reset(rng)
        o = env.observe(s, rng).vector
        for t in range(env.horizon):
            if table is not None:
                a = int(rng.choice(env.n_actions, p=table[s]))
            elif not novelty or rng.random() < epsilon:
                a = int(rng.integers(env.n_actions))
            else:
                best = np.flatnonzero(plan[s] >= plan[s].max() - 1e-12)
                a = int(rng.choice(best))
            visits[s, a] += 1
            s2, terminal = env.step(s, a, rng)
            seen[s, a, s2] += 1
            o2 = env.observe(s2, rng).vector
            obs[i], actions[i], next_obs[i], sids[i], nsids[i] = o, a, o2, s, s2
            last = terminal or t == env.horizon - 1
            i += 1
            if i == n:
                dones[i - 1] = True
                break
            if last:
                dones[i - 1] = True
                break
            s, o = s2, o2
    return Dataset(env.env_id, obs, actions, next_obs, dones, env.n_actions, sids, nsids)


def _novelty_plan(seen: np.ndarray, visits: np.ndarray, gamma: float = 0.9, sweeps: int = 60) -> np.ndarray:
    n_states = seen.shape[0]
    p = np.where(visits[..., None] > 0, seen / np.maximum(visits[..., None], 1), 0.0)
    untried = visits == 0
    bonus = 1.0 / np.sqrt(1.0 + visits)
    q = np.zeros_like(bonus)
    for _ in range(sweeps):
        v = q.max(1)
        stay = np.broadcast_to(v[:, None], q.shape)
        q = bonus + gamma * np.where(untried, stay, p @ v)
    return q


def filter_actions(dataset: Dataset, predicate: Callable[[int], bool]) -> Dataset:
    """Keep transitions whose action satisfies ``predicate``, preserving order."""
    keep = np.array([bool(predicate(a)) for a in range(dataset.n_actions)])
    mask = keep[dataset.actions]
    if not mask.any():
        raise ValueError("action filter removed every transition")
    return dataset.subset(np.flatnonzero(mask))


def relabel(dataset: Dataset, reward: np.ndarray, k: int = DEFAULT_LABELS, seed: int = 0) -> List[LabelledSample]:
    """Draw ``k`` transitions uniformly without replacement and label them by arrival-state reward."""
    if not dataset.has_state_ids:
        raise ValueError("relabelling needs state ids")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=k, replace=False)
    reward = np.asarray(reward, dtype=np.float64)
    return [LabelledSample(dataset.transition(i), float(reward[dataset.next_state_ids[i]])) for i in idx]


def relabel_indices(dataset: Dataset, k: int, seed: int) -> np.ndarray:
    """Indices :func:`relabel` would draw; lets callers label many tasks from one draw."""
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")
    return np.random.default_rng(seed).choice(len(dataset), size=k, replace=False)


def coverage_entropy(dataset: Dataset, n_states: int) -> float:
    """Shannon entropy (nats) of the visited-state histogram, a diversity diagnostic."""
    counts = np.bincount(dataset.state_ids, minlength=n_states).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# trajectory windows


def episode_starts(dataset: Dataset) -> np.ndarray:
    """For every transition, the index of the first transition of its episode."""
    n = len(dataset)
    boundary = np.zeros(n, bool)
    boundary[0] = True
    boundary[1:] = dataset.dones[:-1]
    return np.maximum.accumulate(np.where(boundary, np.arange(n), 0))


@dataclass(frozen=True)
class WindowArrays:
    """Batched windows: ``obs [N, L+1, D]``, ``actions [N, L]``, ``pad [N, L+1]``."""

    obs: np.ndarray
    actions: np.ndarray
    pad: np.ndarray
    terminal_state_ids: Optional[np.ndarray]

    def __len__(self):
        return len(self.obs)

    def window(self, i: int) -> TrajectoryWindow:
        ids = self.terminal_state_ids
        return TrajectoryWindow(self.obs[i], self.actions[i], self.pad[i], None if ids is None else int(ids[i]))


def window_arrays(dataset: Dataset, L: int = DEFAULT_CONTEXT_LENGTH) -> WindowArrays:
    """One window per transition ``t``: observations ``o_{t-L+1..t+1}`` and actions ``a_{t-L+1..t}``.

    Positions before the episode start are zero and flagged in ``pad``; windows
    never cross episode boundaries.  Padded actions are stored as ``-1``.
    """
    if L < 1:
        raise ValueError("context length must be at least 1")
    n, d = len(dataset), dataset.obs_dim
    start = episode_starts(dataset)
    t = np.arange(n)
    # transition index feeding each of the L slots (oldest first)
    src = t[:, None] - (L - 1) + np.arange(L)[None, :]
    valid = src >= start[:, None]
    src_c = np.clip(src, 0, n - 1)
    obs = np.zeros((n, L + 1, d), np.float32)
    obs[:, :L] = np.where(valid[..., None], dataset.obs[src_c], 0.0)
    obs[:, L] = dataset.next_obs
    actions = np.where(valid, dataset.actions[src_c], -1)
    pad = np.zeros((n, L + 1), bool)
    pad[:, :L] = ~valid
    return WindowArrays(obs, actions, pad, dataset.next_state_ids)


def windows(dataset: Dataset, L: int = DEFAULT_CONTEXT_LENGTH) -> Iterator[TrajectoryWindow]:
    arrays = window_arrays(dataset, L)
    for i in range(len(arrays)):
        yield arrays.window(i)


# ---------------------------------------------------------------------------
# binary format


def _record_dtype(obs_dim: int, ids: bool) -> np.dtype:
    fields = [("obs", "<f4", (obs_dim,)), ("action", "<u2"), ("next_obs", "<f4", (obs_dim,))]
    if ids:
        fields += [("state_id", "<u4"), ("next_state_id", "<u4")]
    fields.append(("done", "u1"))
    return np.dtype(fields)


def record_size(obs_dim: int, ids: bool) -> int:
    return _record_dtype(obs_dim, ids).itemsize


def header_size(env_id: str) -> int:
    return 4 + 4 + 2 + len(env_id.encode("utf-8")) + 4 + 4 + 4 + 8


def save(dataset: Dataset, path) -> None:
    ids = dataset.has_state_ids
    flags = (FLAG_STATE_IDS if ids else 0) | (FLAG_EPISODIC if dataset.episodic else 0)
    env = dataset.env_id.encode("utf-8")
    if dataset.n_actions > 0xFFFF:
        raise ValueError("actions must fit in u16")
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.obs_dim, ids))
    rec["obs"] = dataset.obs
    rec["action"] = dataset.actions
    rec["next_obs"] = dataset.next_obs
    if ids:
        rec["state_id"] = dataset.state_ids
        rec["next_state_id"] = dataset.next_state_ids
    rec["done"] = dataset.dones
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IH", VERSION, len(env)))
        fh.write(env)
        fh.write(struct.pack("<IIIQ", dataset.obs_dim, dataset.n_actions, flags, len(dataset)))
        fh.write(rec.tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    version, env_len = struct.unpack_from("<IH", raw, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    pos = 10
    if len(raw) < pos + env_len + 20:
        raise DatasetFormatError(f"{path}: truncated header")
    env_id = raw[pos : pos + env_len].decode("utf-8")
    pos += env_len
    obs_dim, n_actions, flags, count = struct.unpack_from("<IIIQ", raw, pos)
    pos += 20
    ids = bool(flags & FLAG_STATE_IDS)
    dtype = _record_dtype(obs_dim, ids)
    if len(raw) - pos != count * dtype.itemsize:
        raise DatasetFormatError(
            f"{path}: expected {count * dtype.itemsize} record bytes, found {len(raw) - pos}"
        )
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return Dataset(
        env_id,
        rec["obs"],
        rec["action"].astype(np.int64),
        rec["next_obs"],
        rec["done"].astype(bool),
        n_actions,
        rec["state_id"].astype(np.int64) if ids else None,
        rec["next_state_id"].astype(np.int64) if ids else None,
        bool(flags & FLAG_EPISODIC),
    )
