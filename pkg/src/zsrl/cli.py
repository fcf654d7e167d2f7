"""Command line entry point: ``zsrl collect|train|eval|oracle|pearl|plot``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import torch

from . import data as data_mod
from .envs import ACTION_NAMES, env_tasks, make_env
from .evaluation import ScoreTable, summarise


def _overrides(args) -> Dict[str, Dict[str, Optional[str]]]:
    exp = {
        "env": args.env,
        "agent": args.agent,
        "dataset": args.dataset,
        "steps": args.steps,
        "eval_every": args.eval_every,
        "seeds": args.seeds,
        "rollouts": args.rollouts,
        "labels": args.labels,
    }
    mem = {"context_length": args.context_length, "kind": args.memory}
    cons = {"budget_tau": args.tau}
    as_str = lambda d: {k: None if v is None else str(v) for k, v in d.items()}
    return {"experiment": as_str(exp), "memory": as_str(mem), "conservative": as_str(cons)}


def cmd_collect(args) -> int:
    env = make_env(args.env)
    ds = data_mod.collect(env, args.behaviour, args.size, args.seed)
    if args.exclude_action:
        banned = ACTION_NAMES.index(args.exclude_action)
        ds = data_mod.filter_actions(ds, lambda a: a != banned)
    data_mod.save(ds, args.out)
    entropy = data_mod.coverage_entropy(ds, env.n_states)
    print(f"transitions = {len(ds)}\ncoverage_entropy = {entropy:.4f}\npath = {args.out}")
    return 0


def cmd_train(args) -> int:
    from .experiment import load_config, read_summary, run_experiment

    torch.set_num_threads(args.threads)
    cfg = load_config(args.config, _overrides(args))
    out = run_experiment(cfg, args.out, save_checkpoints=not args.no_checkpoints)
    for k, v in read_summary(out / "summary.txt").items():
        print(f"{k} = {v}")
    return 0


def cmd_eval(args) -> int:
    table = ScoreTable.load(Path(args.results) / "scores.npz")
    c, rows, overall = summarise(table, args.resamples, args.level)
    print(f"selected_step = {table.steps[c]}")
    for r in rows + [overall]:
        print(f"{r.task}\tiqm={r.iqm:.4f}\tci=[{r.low:.4f}, {r.high:.4f}]")
    return 0


def cmd_oracle(args) -> int:
    from .nets import save_container
    from .oracle import episode_score, exact_successor_measure, value_iteration

    env = make_env(args.env)
    groups = {}
    for name, r in env_tasks(env).items():
        q, pi = value_iteration(env.mdp, r)
        m = exact_successor_measure(env.mdp, pi)
        score = episode_score(env.mdp, pi, r, env.horizon)
        groups[name] = {"q": q, "policy": pi, "successor_measure": m, "reward": r}
        print(f"{name}\toptimal_return={score:.6f}")
    if args.out:
        save_container(args.out, groups, {"env": args.env, "gamma": env.gamma, "horizon": env.horizon})
        print(f"path = {args.out}")
    return 0


def cmd_pearl(args) -> int:
    from .pearl import PearlConfig, pearl_episode

    torch.set_num_threads(args.threads)
    cfg = PearlConfig(controller=args.controller)
    res = pearl_episode(args.sim, cfg, args.days, args.seed)
    sink = open(args.log, "w") if args.log else None
    for step, metric, value in res.log:
        line = f"{step}\t{metric}\t{value:.6g}"
        if sink:
            sink.write(line + "\n")
        else:
            print(line)
    if sink:
        sink.close()
    record = {"sim": args.sim, "controller": args.controller, "days": args.days, "seed": args.seed, **res.summary()}
    print(json.dumps(record))
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_emit

    for p in plot_emit(args.results):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsrl", description="Zero-shot RL toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="collect and save an offline dataset")
    c.add_argument("--env", default="grid5")
    c.add_argument("--behaviour", default="uniform", choices=["uniform", "count-bonus"])
    c.add_argument("--size", type=int, default=data_mod.DEFAULT_COLLECTION_SIZE)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--exclude-action", choices=ACTION_NAMES)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train an agent and score checkpoints")
    t.add_argument("--config")
    t.add_argument("--env")
    t.add_argument("--agent", help="fb, vcfb, mcfb, dvcfb, usf, vcsf or fbm")
    t.add_argument("--dataset")
    t.add_argument("--steps", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--seeds", help="comma separated")
    t.add_argument("--rollouts", type=int)
    t.add_argument("--labels", type=int)
    t.add_argument("--context-length", type=int)
    t.add_argument("--memory", choices=["gru", "identity", "stack"])
    t.add_argument("--tau", type=float, help="conservative budget")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--no-checkpoints", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="summarise a results directory")
    e.add_argument("--results", required=True)
    e.add_argument("--resamples", type=int, default=2000)
    e.add_argument("--level", type=float, default=0.95)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact optimal values and successor measures")
    o.add_argument("--env", default="grid5")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("pearl", help="run a building controller")
    b.add_argument("--sim", default="rc1zone", choices=["rc1zone", "rc3zone"])
    b.add_argument("--controller", default="pearl", choices=["pearl", "rbc", "rw", "mpc-det"])
    b.add_argument("--days", type=int, default=30)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--log", help="metrics log path (stdout when unset)")
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_pearl)

    g = sub.add_parser("plot", help="render figures for a results directory")
    g.add_argument("--results", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
