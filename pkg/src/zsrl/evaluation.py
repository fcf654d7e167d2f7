"""Aggregate scoring: interquartile mean, stratified bootstrap intervals and checkpoint selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_ROLLOUTS = 10


def iqm(values) -> float:
    """Interquartile mean with symmetric fractional trimming.

    Sorted values each occupy a unit interval on ``[0, n]``; the result is the
    length-weighted mean over ``[n/4, 3n/4]``.  When ``n`` is a multiple of 4
    this is exactly the mean of the middle half.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(x)
    if n == 0:
        raise ValueError("iqm of an empty collection")
    if n % 4 == 0:
        return float(x[n // 4 : 3 * n // 4].mean())
    lo, hi = n / 4, 3 * n / 4
    edges = np.arange(n + 1, dtype=np.float64)
    w = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    return float(w @ x / w.sum())


@dataclass
class ScoreTable:
    """Episode returns indexed ``[seed, checkpoint, task, rollout]``."""

    scores: np.ndarray
    seeds: List[int]
    steps: List[int]
    tasks: List[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        shape = (len(self.seeds), len(self.steps), len(self.tasks))
        if self.scores.ndim != 4 or self.scores.shape[:3] != shape:
            raise ValueError(f"scores shape {self.scores.shape} does not match axes {shape} + (rollouts,)")

    @property
    def n_rollouts(self) -> int:
        return self.scores.shape[3]

    def at(self, checkpoint: int) -> np.ndarray:
        """``[seed, task, rollout]`` slice at one checkpoint."""
        return self.scores[:, checkpoint]

    def task_values(self, checkpoint: int) -> Dict[str, np.ndarray]:
        """Per-task stratum: every seed's rollouts pooled."""
        sl = self.at(checkpoint)
        return {t: sl[:, i].ravel() for i, t in enumerate(self.tasks)}

    def checkpoint_iqm(self) -> np.ndarray:
        """Seed-averaged all-task IQM per checkpoint."""
        s = self.scores
        per_seed = np.array([[iqm(s[i, c]) for c in range(s.shape[1])] for i in range(s.shape[0])])
        return per_seed.mean(0)

    def save(self, path) -> None:
        np.savez(
            path,
            scores=self.scores,
            seeds=np.asarray(self.seeds, np.int64),
            steps=np.asarray(self.steps, np.int64),
            tasks=np.asarray(self.tasks),
        )

    @classmethod
    def load(cls, path) -> "ScoreTable":
        with np.load(path) as f:
            return cls(f["scores"], f["seeds"].tolist(), f["steps"].tolist(), [str(t) for t in f["tasks"]])


def select_checkpoint(table: ScoreTable) -> int:
    """Checkpoint maximising the seed-averaged all-task IQM; ties go to the earliest.

    Values within a few ulps of the maximum count as ties, so summation order
    in the seed average cannot break them.
    """
    if table.scores.size == 0:
        raise ValueError("empty score table")
    vals = table.checkpoint_iqm()
    best = vals.max()
    return int(np.flatnonzero(vals >= best - 1e-12 * max(1.0, abs(best)))[0])


def bootstrap_iqms(strata: Sequence[np.ndarray], n_resamples: int, rng: np.random.Generator) -> np.ndarray:
    """Pooled IQM of ``n_resamples`` stratified resamples (each stratum resampled with replacement)."""
    strata = [np.asarray(s, dtype=np.float64).ravel() for s in strata]
    out = np.empty(n_resamples)
    for b in range(n_resamples):
        out[b] = iqm(np.concatenate([s[rng.integers(0, len(s), len(s))] for s in strata]))
    return out


def stratified_bootstrap_ci(
    table, n_resamples: int = 2000, level: float = 0.95, seed: int = 0, checkpoint: Optional[int] = None
) -> Tuple[float, float]:
    """Percentile interval of the all-task IQM under resampling within each task.

    ``table`` is a :class:`ScoreTable` (scored at ``checkpoint``, default the
    selected one) or a sequence of per-task value arrays.
    """
    if isinstance(table, ScoreTable):
        c = select_checkpoint(table) if checkpoint is None else checkpoint
        strata = list(table.task_values(c).values())
    else:
        strata = [np.asarray(s, dtype=np.float64).ravel() for s in table]
    if len(strata) < 2:
        raise ValueError("stratified bootstrap needs at least two strata")
    if any(len(s) < 2 for s in strata):
        raise ValueError("every stratum needs at least two values")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    stats = bootstrap_iqms(strata, n_resamples, np.random.default_rng(seed))
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(stats, [tail, 100 - tail])
    return float(lo), float(hi)


@dataclass
class TaskSummary:
    task: str
    iqm: float
    low: float
    high: float


def summarise(table: ScoreTable, n_resamples: int = 2000, level: float = 0.95, seed: int = 0) -> Tuple[int, List[TaskSummary], TaskSummary]:
    """Per-task and all-task IQM with bootstrap intervals at the selected checkpoint.

    Per-task intervals resample rollouts within each seed (seeds act as strata).
    """
    c = select_checkpoint(table)
    rows = []
    for i, t in enumerate(table.tasks):
        vals = table.at(c)[:, i]
        if len(vals) >= 2:
            lo, hi = stratified_bootstrap_ci(list(vals), n_resamples, level, seed)
        else:
            boot = bootstrap_iqms([vals.ravel()], n_resamples, np.random.default_rng(seed))
            lo, hi = np.percentile(boot, [(1 - level) * 50, 100 - (1 - level) * 50])
        rows.append(TaskSummary(t, iqm(vals), float(lo), float(hi)))
    if len(table.tasks) >= 2:
        lo, hi = stratified_bootstrap_ci(table, n_resamples, level, seed, c)
    else:
        lo, hi = rows[0].low, rows[0].high
    return c, rows, TaskSummary("all", iqm(table.at(c)), lo, hi)
