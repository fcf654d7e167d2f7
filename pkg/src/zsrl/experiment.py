"""Batch experiment runner: train an agent, score it at checkpoints, write a results directory.

Results directory layout::

    scores.npz        ScoreTable [seed, checkpoint, task, rollout]
    metrics.tsv       step<TAB>metric<TAB>value training records (prefixed by seed)
    summary.txt       key = value lines: selected checkpoint, IQM and CI per task
    checkpoints/      seed<S>_step<T>.zsrl parameter containers
    failure.txt       only when a run raised; holds the traceback
"""

from __future__ import annotations

import configparser
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import data as data_mod
from .conservative import ConservativeConfig, ConservativeFBAgent, ConservativeUSFAgent
from .envs import ACTION_NAMES, Env, env_tasks, make_env
from .evaluation import DEFAULT_ROLLOUTS, ScoreTable, summarise
from .fb import (
    FBAgent,
    FBConfig,
    FBModel,
    TrainLog,
    USFAgent,
    USFModel,
    greedy_action,
    infer_task_fb,
    infer_task_usf,
    rollout,
)
from .memory import FBMAgent, FBMModel, MemoryConfig, infer_task_fbm, rollout_with_memory
from .nets import module_arrays, save_container

AGENTS = ("fb", "vcfb", "mcfb", "dvcfb", "usf", "vcsf", "fbm")
_CONSERVATIVE = {"vcfb": "VC", "mcfb": "MC", "dvcfb": "DVC", "vcsf": "VCSF"}


@dataclass
class ExperimentConfig:
    env: str = "grid5"
    agent: str = "fb"
    dataset: Optional[str] = None  # path to a saved dataset; collected on the fly when unset
    behaviour: str = "uniform"
    dataset_size: int = 100_000
    data_seed: int = 0
    exclude_action: Optional[str] = None  # drop one action name from the collected data
    steps: int = 20_000
    eval_every: int = 1_000
    seeds: Tuple[int, ...] = (0, 1, 2)
    rollouts: int = DEFAULT_ROLLOUTS
    labels: int = 1_000
    log_every: int = 100
    fb: FBConfig = field(default_factory=lambda: FBConfig(batch_size=256))
    conservative: ConservativeConfig = field(default_factory=ConservativeConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    def __post_init__(self):
        if self.agent not in AGENTS:
            raise ValueError(f"agent must be one of {AGENTS}")
        if self.steps < 0 or self.eval_every <= 0:
            raise ValueError("steps must be >= 0 and eval_every > 0")
        if self.dataset is not None and not Path(self.dataset).exists():
            raise FileNotFoundError(self.dataset)
        if self.exclude_action is not None and self.exclude_action not in ACTION_NAMES:
            raise ValueError(f"exclude_action must be one of {ACTION_NAMES}")
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def checkpoint_steps(self) -> List[int]:
        return [0] + list(range(self.eval_every, self.steps + 1, self.eval_every))


# ---------------------------------------------------------------------------
# INI configuration


def _coerce(value: str, current):
    value = value.strip()
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        items = [v for v in value.replace(",", " ").split() if v]
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in items)
    if current is None:
        return None if value.lower() in ("", "none") else value
    return type(current)(value)


def _apply(obj, items: Dict[str, str]):
    known = {f.name for f in fields(obj)}
    updates = {}
    for k, v in items.items():
        key = k.replace("-", "_")
        if key not in known:
            raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
        updates[key] = _coerce(v, getattr(obj, key))
    return replace(obj, **updates)


def load_config(path=None, overrides: Optional[Dict[str, Dict[str, str]]] = None) -> ExperimentConfig:
    """Read ``[experiment]``, ``[agent]``, ``[conservative]`` and ``[memory]`` sections; overrides win."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser.read(path)
    sections: Dict[str, Dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for sec, items in (overrides or {}).items():
        sections.setdefault(sec, {}).update({k: v for k, v in items.items() if v is not None})
    unknown = set(sections) - {"experiment", "agent", "conservative", "memory"}
    if unknown:
        raise KeyError(f"unknown config sections {sorted(unknown)}")
    defaults = ExperimentConfig.__dataclass_fields__
    kw = {
        "fb": _apply(FBConfig(batch_size=256), sections.get("agent", {})),
        "conservative": _apply(ConservativeConfig(), sections.get("conservative", {})),
        "memory": _apply(MemoryConfig(), sections.get("memory", {})),
    }
    for k, v in sections.get("experiment", {}).items():
        key = k.replace("-", "_")
        if key not in defaults or key in kw:
            raise KeyError(f"unknown experiment key {k!r}")
        kw[key] = _coerce(v, defaults[key].default)
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# data and agents


def build_dataset(cfg: ExperimentConfig, env: Env) -> data_mod.Dataset:
    if cfg.dataset is not None:
        ds = data_mod.load(cfg.dataset)
    else:
        ds = data_mod.collect(env, cfg.behaviour, cfg.dataset_size, cfg.data_seed)
    if cfg.exclude_action is not None:
        banned = ACTION_NAMES.index(cfg.exclude_action)
        ds = data_mod.filter_actions(ds, lambda a: a != banned)
    return ds


def build_agent(cfg: ExperimentConfig, env: Env, seed: int):
    torch.manual_seed(seed)
    fcfg = cfg.fb
    if cfg.agent == "fbm":
        model = FBMModel(env.obs_dim, env.n_actions, fcfg, cfg.memory, seed)
        return FBMAgent(model, fcfg, seed)
    if cfg.agent in ("usf", "vcsf"):
        model = USFModel.build(env.obs_dim, env.n_actions, fcfg, seed)
        if cfg.agent == "usf":
            return USFAgent(model, fcfg, seed)
        return ConservativeUSFAgent(model, fcfg, replace(cfg.conservative, variant="VCSF"), seed)
    model = FBModel.build(env.obs_dim, env.n_actions, fcfg, seed)
    if cfg.agent == "fb":
        return FBAgent(model, fcfg, seed)
    return ConservativeFBAgent(model, fcfg, replace(cfg.conservative, variant=_CONSERVATIVE[cfg.agent]), seed)


class TaskSampler:
    """Reward-labelled samples for every task, drawn once per seed."""

    def __init__(self, cfg: ExperimentConfig, env: Env, dataset: data_mod.Dataset, seed: int):
        if not dataset.has_state_ids:
            raise ValueError("task inference needs datasets with state ids")
        self.cfg, self.env = cfg, env
        self.tasks = env_tasks(env)
        k = min(cfg.labels, len(dataset))
        self.idx = data_mod.relabel_indices(dataset, k, seed)
        self.dataset = dataset
        self.windows = None
        if cfg.agent == "fbm":
            L = max(cfg.memory.context_length, cfg.memory.length_b)
            arrays = data_mod.window_arrays(dataset, L)
            self.windows = (arrays.obs[self.idx], arrays.actions[self.idx], arrays.pad[self.idx])

    def infer(self, agent, reward: np.ndarray):
        ds, idx = self.dataset, self.idx
        r = reward[ds.next_state_ids[idx]]
        if self.windows is not None:
            return infer_task_fbm(agent.model, *self.windows, r)
        if isinstance(agent.model, USFModel):
            return infer_task_usf(agent.model, (ds.next_obs[idx], r), self.cfg.fb.ridge)
        return infer_task_fb(agent.model, (ds.next_obs[idx], r))


def evaluate(agent, env: Env, sampler: TaskSampler, rollouts: int, seed: int, step: int) -> np.ndarray:
    """``[task, rollout]`` episode returns of the greedy task-conditioned policy."""
    out = np.zeros((len(sampler.tasks), rollouts))
    for ti, (name, reward) in enumerate(sampler.tasks.items()):
        z = sampler.infer(agent, reward)
        rng = np.random.default_rng([seed, step, ti])
        for k in range(rollouts):
            if isinstance(agent, FBMAgent):
                out[ti, k] = rollout_with_memory(agent.model, env, z, reward, rng)
            else:
                out[ti, k] = rollout(env, lambda o: greedy_action(agent.model, o, z), reward, rng)
    return out


# ---------------------------------------------------------------------------
# runner


def _write_summary(path: Path, cfg: ExperimentConfig, table: ScoreTable) -> Dict[str, float]:
    c, rows, overall = summarise(table)
    record = {"env": cfg.env, "agent": cfg.agent, "selected_checkpoint": c, "selected_step": table.steps[c]}
    for row in rows + [overall]:
        record[f"iqm.{row.task}"] = row.iqm
        record[f"ci_low.{row.task}"] = row.low
        record[f"ci_high.{row.task}"] = row.high
    with open(path, "w") as f:
        for k, v in record.items():
            f.write(f"{k} = {v}\n")
    return record


def read_summary(path) -> Dict[str, str]:
    out = {}
    with open(path) as f:
        for line in f:
            if "=" in line:
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def run_seed(cfg: ExperimentConfig, env: Env, dataset, seed: int, ckpt_dir: Optional[Path] = None) -> Tuple[np.ndarray, TrainLog]:
    """Train one seed and score it at every checkpoint; returns ``[checkpoint, task, rollout]``."""
    agent = build_agent(cfg, env, seed)
    sampler = TaskSampler(cfg, env, dataset, seed)
    steps = cfg.checkpoint_steps
    scores = np.zeros((len(steps), len(sampler.tasks), cfg.rollouts))

    def checkpoint(i: int, step: int):
        scores[i] = evaluate(agent, env, sampler, cfg.rollouts, seed, step)
        if ckpt_dir is not None:
            meta = {"env": cfg.env, "agent": cfg.agent, "seed": seed, "step": step}
            save_container(ckpt_dir / f"seed{seed}_step{step}.zsrl", {"model": module_arrays(agent.model)}, meta)

    log = TrainLog()
    checkpoint(0, 0)
    for i, step in enumerate(steps[1:], start=1):
        agent.train(dataset, step - agent.step, log_every=cfg.log_every, log=log)
        checkpoint(i, step)
    return scores, log


def run_experiment(cfg: ExperimentConfig, out_dir, save_checkpoints: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints"
    if save_checkpoints:
        ckpt.mkdir(exist_ok=True)
    try:
        env = make_env(cfg.env)
        dataset = build_dataset(cfg, env)
        per_seed = []
        with open(out / "metrics.tsv", "w") as f:
            for seed in cfg.seeds:
                scores, log = run_seed(cfg, env, dataset, seed, ckpt if save_checkpoints else None)
                per_seed.append(scores)
                for step, metric, value in log.records:
                    f.write(f"{step}\tseed{seed}/{metric}\t{value:.6g}\n")
        table = ScoreTable(np.stack(per_seed), list(cfg.seeds), cfg.checkpoint_steps, list(env_tasks(env)))
        table.save(out / "scores.npz")
        _write_summary(out / "summary.txt", cfg, table)
    except Exception:
        (out / "failure.txt").write_text(traceback.format_exc())
        raise
    return out
