#!/usr/bin/env python3
"""Dump PGM montages of one episode per task, before and after augmentation."""

import argparse
import sys

import numpy as np

from neuralizer.augment import apply_tree, default_tree
from neuralizer.config import to_train_config
from neuralizer.datagen import build_episode, make_pool
from neuralizer.episode import TaskKind
from neuralizer.evaluate import dump_episode_pgms
from neuralizer.reference import desk_run_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/previews")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--context-size", type=int, default=3)
    args = parser.parse_args()

    cfg = to_train_config(desk_run_config())
    pool = make_pool(12, cfg.phantom, args.seed * 1000 + 1)
    tree = default_tree()
    for task in TaskKind:
        rng = np.random.default_rng(args.seed)
        ep = build_episode(task, pool, cfg.sampler, rng, context_size=args.context_size)
        dump_episode_pgms(ep, args.out, f"{task.value}")
        aug = apply_tree(ep, tree, args.seed)
        dump_episode_pgms(aug, args.out, f"{task.value}_augmented")
        print(f"wrote previews for {task.value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
