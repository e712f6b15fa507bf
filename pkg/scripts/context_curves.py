#!/usr/bin/env python3
"""Metric-vs-context-size curves, optionally against task-specific baselines.

Evaluates reference (or given) checkpoints on paired episodes over context
sizes {1,2,4,8} and writes a CSV report. With --with-baselines, task-specific
U-Nets are trained on matching subject counts first (slow: one model per
(task, n) cell plus replicates at n=1 and n=2).
"""

import argparse
import sys
from pathlib import Path

from neuralizer.checkpoint import load_checkpoint
from neuralizer.config import to_train_config
from neuralizer.episode import TaskKind
from neuralizer.evaluate import eval_curves
from neuralizer.datagen import SamplerConfig
from neuralizer.reference import (
    EPISODES_PER_CELL,
    EVAL_SEED,
    desk_run_config,
    ensure_reference_models,
    eval_pool,
)
from neuralizer.train import baseline_frozen_for, baseline_replicates, train_baseline


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="runs/reference")
    parser.add_argument("--out", default="runs/reference/context_curves.csv")
    parser.add_argument("--ckpt", action="append", default=[], metavar="ID=PATH",
                        help="extra checkpoints to include")
    parser.add_argument("--tasks", nargs="+",
                        default=["segmentation", "denoise_bias", "inpainting"])
    parser.add_argument("--sizes", nargs="+", type=int, default=[1, 2, 4, 8])
    parser.add_argument("--with-baselines", action="store_true")
    parser.add_argument("--baseline-steps", type=int, default=1500)
    args = parser.parse_args()

    models = dict(ensure_reference_models(args.root))
    for item in args.ckpt:
        mid, path = item.split("=", 1)
        models[mid] = load_checkpoint(path)
    tasks = [TaskKind.from_name(t) for t in args.tasks]

    train_cfg = to_train_config(desk_run_config())
    frozen = {t: baseline_frozen_for(t, train_cfg) for t in tasks}
    frozen = {t: f for t, f in frozen.items() if f}

    baselines = None
    if args.with_baselines:
        train_cfg.steps_max = args.baseline_steps
        baselines = {}
        for task in tasks:
            for n in args.sizes:
                reps = []
                for r in range(baseline_replicates(n)):
                    print(f"training baseline {task.value} n={n} replicate {r}", flush=True)
                    reps.append(train_baseline(task, n, train_cfg, replicate=r))
                baselines[(task, n)] = reps

    report = eval_curves(models, tasks, eval_pool(), sizes=tuple(args.sizes),
                         episodes_per_cell=EPISODES_PER_CELL, seed=EVAL_SEED,
                         sampler=SamplerConfig(), baselines=baselines,
                         frozen_by_task=frozen if baselines else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    print(report.to_csv())
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
