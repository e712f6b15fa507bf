#!/usr/bin/env python3
"""Train the frozen desk-scale reference models (seen + class-2 holdout).

Writes checkpoints under runs/reference/ and prints the trend metrics the
acceptance suite checks. Each model takes roughly an hour on a laptop CPU;
existing checkpoints are reused.
"""

import argparse
import sys
import time
from pathlib import Path

from neuralizer.reference import (
    denoise_psnr_gain,
    ensure_reference_models,
    eval_pool,
    held_out_class_gap,
    segmentation_dice_curve,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="runs/reference")
    parser.add_argument("--skip-eval", action="store_true")
    args = parser.parse_args()

    root = Path(args.root)
    t0 = time.time()

    def progress(step, train_loss, val_loss):
        print(f"  step {step:5d}  train {train_loss:12.4f}  val {val_loss:12.4f}  "
              f"[{(time.time() - t0) / 60:.1f} min]", flush=True)

    models = ensure_reference_models(root, progress=progress)
    for name, ckpt in models.items():
        print(f"{name}: best val {ckpt.best_val:.4f} at step {ckpt.step} "
              f"({ckpt.meta.get('train_minutes', '?')} min)")

    if args.skip_eval:
        return 0

    pool = eval_pool()
    dice = segmentation_dice_curve(models["seen"], pool)
    print("segmentation dice vs context size:",
          {n: round(v, 4) for n, v in dice.items()})
    gain = denoise_psnr_gain(models["seen"], pool)
    print(f"denoise: input {gain['input_psnr']:.2f} dB -> "
          f"prediction {gain['prediction_psnr']:.2f} dB")
    gap = held_out_class_gap(models["seen"], models["holdout"], pool)
    print(f"held-out class dice: seen {gap['seen']:.4f}, unseen {gap['unseen']:.4f}, "
          f"gap {gap['gap']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
