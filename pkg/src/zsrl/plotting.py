"""Static figures from a results directory: learning curves and a bar summary."""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ScoreTable, bootstrap_iqms, iqm, summarise  # noqa: E402


def curve_points(table: ScoreTable, task_index: int, n_resamples: int = 500, level: float = 0.95, seed: int = 0):
    """IQM and percentile band per checkpoint for one task (seeds as strata)."""
    rng = np.random.default_rng(seed)
    tail = (1 - level) * 50
    mid, lo, hi = [], [], []
    for c in range(len(table.steps)):
        vals = table.at(c)[:, task_index]
        mid.append(iqm(vals))
        boot = bootstrap_iqms(list(vals), n_resamples, rng)
        a, b = np.percentile(boot, [tail, 100 - tail])
        lo.append(a)
        hi.append(b)
    return np.array(mid), np.array(lo), np.array(hi)


def plot_emit(results_dir, n_resamples: int = 500) -> List[Path]:
    """Write ``learning_curves.png``, ``summary.png`` and ``plot_data.tsv`` into ``results_dir``."""
    root = Path(results_dir)
    path = root / "scores.npz"
    if not path.exists():
        raise FileNotFoundError(f"no scores.npz in {root}")
    table = ScoreTable.load(path)
    if not table.tasks:
        raise ValueError("score table has no tasks")
    c, rows, overall = summarise(table)
    steps = np.asarray(table.steps)

    records = []
    n = len(table.tasks)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False)
    for i, (ax, task) in enumerate(zip(axes[0], table.tasks)):
        mid, lo, hi = curve_points(table, i, n_resamples)
        ax.plot(steps, mid, marker="o" if len(steps) == 1 else None)
        ax.fill_between(steps, lo, hi, alpha=0.25)
        ax.set_title(task, fontsize=9)
        ax.set_xlabel("step")
        for s, m, a, b in zip(steps, mid, lo, hi):
            records.append(("curve", task, int(s), m, a, b))
    axes[0][0].set_ylabel("IQM return")
    fig.tight_layout()
    curves = root / "learning_curves.png"
    fig.savefig(curves, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(1.2 * (n + 1) + 1, 2.8))
    bars = rows + [overall]
    vals = np.array([r.iqm for r in bars])
    err = np.array([[r.iqm - r.low for r in bars], [r.high - r.iqm for r in bars]])
    ax.bar(range(len(bars)), vals, yerr=np.clip(err, 0, None), capsize=3)
    ax.set_xticks(range(len(bars)), [r.task for r in bars], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"IQM at step {table.steps[c]}")
    fig.tight_layout()
    summary = root / "summary.png"
    fig.savefig(summary, dpi=100)
    plt.close(fig)
    for r in bars:
        records.append(("bar", r.task, int(table.steps[c]), r.iqm, r.low, r.high))

    data = root / "plot_data.tsv"
    with open(data, "w") as f:
        f.write("kind\ttask\tstep\tiqm\tlow\thigh\n")
        for kind, task, s, m, a, b in records:
            f.write(f"{kind}\t{task}\t{s}\t{m!r}\t{a!r}\t{b!r}\n")
    return [curves, summary, data]
