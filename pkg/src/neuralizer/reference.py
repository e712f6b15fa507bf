"""Frozen desk-scale reference protocol shared by scripts and the acceptance suite.

One seed, one desk configuration (16 channels, 32x32 images, 5000 steps),
one class-holdout variant, and one evaluation recipe. Training a model
takes roughly an hour of CPU time; checkpoints are cached under a run
root so repeated evaluations are cheap.
"""

from __future__ import annotations

import copy
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import default_run_config, to_train_config
from .datagen import Holdout, SamplerConfig, build_episode, make_pool
from .episode import TaskKind
from .evaluate import eval_curves, holdout_compare, infer, params_from_checkpoint
from .losses import psnr
from .train import train_neuralizer

REFERENCE_SEED = 1234
HELD_OUT_CLASS = 2
EVAL_POOL_SIZE = 32
EVAL_POOL_SEED = 900000
EVAL_SEED = 424242
EPISODES_PER_CELL = 50
CONTEXT_SIZES = (1, 4, 8)


def desk_run_config(holdout_class: int | None = None) -> dict:
    cfg = default_run_config()
    cfg["seed"] = REFERENCE_SEED
    if holdout_class is not None:
        cfg = copy.deepcopy(cfg)
        cfg["sampler"]["holdout"]["classes"] = [holdout_class]
    return cfg


def reference_paths(root: str | Path) -> dict[str, Path]:
    root = Path(root)
    return {"seen": root / "seen" / "model.nlz1",
            "holdout": root / "holdout_class2" / "model.nlz1"}


def ensure_reference_models(root: str | Path, progress=None) -> dict[str, Checkpoint]:
    """Load the cached reference checkpoints, training any that are missing."""
    paths = reference_paths(root)
    out: dict[str, Checkpoint] = {}
    for name, path in paths.items():
        if path.exists():
            out[name] = load_checkpoint(path)
            continue
        run_cfg = desk_run_config(HELD_OUT_CLASS if name == "holdout" else None)
        train_cfg = to_train_config(run_cfg)
        t0 = time.time()
        ckpt = train_neuralizer(train_cfg, progress=progress)
        ckpt.meta["train_minutes"] = round((time.time() - t0) / 60.0, 1)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, path)
        out[name] = ckpt
    return out


def eval_pool():
    run_cfg = desk_run_config()
    train_cfg = to_train_config(run_cfg)
    return make_pool(EVAL_POOL_SIZE, train_cfg.phantom, EVAL_POOL_SEED)


def segmentation_dice_curve(ckpt: Checkpoint, pool=None,
                            sizes=CONTEXT_SIZES) -> dict[int, float]:
    """Mean segmentation Dice per context size on the frozen eval episodes."""
    pool = pool if pool is not None else eval_pool()
    sampler = SamplerConfig()
    report = eval_curves({"model": ckpt}, [TaskKind.SEGMENTATION], pool, sizes=sizes,
                         episodes_per_cell=EPISODES_PER_CELL, seed=EVAL_SEED,
                         sampler=sampler)
    return {n: report.cell("model", "segmentation", n).mean for n in sizes}


def denoise_psnr_gain(ckpt: Checkpoint, pool=None, n_ctx: int = 4,
                      episodes: int = EPISODES_PER_CELL) -> dict[str, float]:
    """Mean PSNR of the prediction vs of the corrupted input, paired episodes."""
    pool = pool if pool is not None else eval_pool()
    params = params_from_checkpoint(ckpt)
    sampler = SamplerConfig()
    in_scores, pred_scores = [], []
    for e in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([EVAL_SEED, 99, n_ctx, e]))
        ep = build_episode(TaskKind.DENOISE_BIAS, pool, sampler, rng, context_size=n_ctx)
        pred = infer(ep.input, ep.context_stack(), params)
        in_scores.append(psnr(ep.input[0], ep.target[0]))
        pred_scores.append(psnr(pred.logits[0], ep.target[0]))
    return {"input_psnr": float(np.mean(in_scores)),
            "prediction_psnr": float(np.mean(pred_scores))}


def held_out_class_gap(seen: Checkpoint, unseen: Checkpoint, pool=None,
                       n_ctx: int = 4) -> dict[str, float]:
    """Dice of both models on episodes segmenting exactly the held-out class."""
    pool = pool if pool is not None else eval_pool()
    report = holdout_compare(seen, unseen, Holdout(classes=frozenset({HELD_OUT_CLASS})),
                             pool, sizes=(n_ctx,), episodes_per_cell=EPISODES_PER_CELL,
                             seed=EVAL_SEED, sampler=SamplerConfig())
    return {"seen": report.cell("seen", "segmentation", n_ctx).mean,
            "unseen": report.cell("unseen", "segmentation", n_ctx).mean,
            "gap": report.meta["gaps"][n_ctx]}
