"""Task-dependent training losses and evaluation metrics.

Segmentation-like tasks train with a soft Dice loss on logits (sigmoid is
folded into the loss); all other tasks use mean squared error weighted by
1/(2*sigma^2). Evaluation uses the hard Dice coefficient at threshold 0.5
and PSNR on [0,1]-clamped intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PSNR_CAP_DB = 99.0


@dataclass
class LossConfig:
    kind: str = "mse"  # "dice" | "mse"
    sigma2: float = 0.05
    dice_eps: float = 1e-6
    psnr_peak: float = 1.0

    def __post_init__(self):
        if self.kind not in ("dice", "mse"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")


def _require_binary(arr: np.ndarray, name: str) -> None:
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError(f"{name} must be binary (0/1)")


def soft_dice_loss(pred_logits: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """1 - mean_b (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), p = sigmoid(logits).

    Per-image Dice averaged over the batch; eps keeps empty masks stable.
    """
    if pred_logits.shape != target.shape:
        raise ValueError(f"shape mismatch {pred_logits.shape} vs {target.shape}")
    _require_binary(target.data, "dice target")
    b = pred_logits.shape[0]
    reduce_axes = tuple(range(1, pred_logits.data.ndim))
    p = T.sigmoid(pred_logits)
    inter = T.tsum(T.mul(p, target), reduce_axes)
    denom = T.add(T.tsum(p, reduce_axes), T.tsum(target, reduce_axes))
    dice = T.div(T.add_scalar(T.scale(inter, 2.0), eps), T.add_scalar(denom, eps))
    return T.add_scalar(T.scale(T.tsum(dice), -1.0 / b), 1.0)


def weighted_mse_loss(pred: Tensor, target: Tensor, sigma2: float = 0.05) -> Tensor:
    """(1/(2*sigma2)) * sum of squared pixel errors per image, averaged over batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    b = pred.shape[0]
    diff = T.sub(pred, target)
    return T.scale(T.tsum(T.mul(diff, diff)), 1.0 / (2.0 * sigma2 * b))


def episode_loss(pred: Tensor, target: Tensor, kind: str, sigma2: float = 0.05,
                 dice_eps: float = 1e-6) -> Tensor:
    if kind == "dice":
        return soft_dice_loss(pred, target, eps=dice_eps)
    if kind == "mse":
        return weighted_mse_loss(pred, target, sigma2=sigma2)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# evaluation metrics (plain arrays, no gradients)


def threshold_mask(logits: np.ndarray) -> np.ndarray:
    """Hard mask from logits: sigmoid(x) > 0.5 is exactly x > 0."""
    return (logits > 0.0).astype(np.float32)


def dice_coefficient(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    if pred_mask.shape != target_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {target_mask.shape}")
    _require_binary(pred_mask, "pred_mask")
    _require_binary(target_mask, "target_mask")
    a = float(pred_mask.sum())
    b = float(target_mask.sum())
    if a + b == 0.0:
        return 1.0
    inter = float((pred_mask * target_mask).sum())
    return 2.0 * inter / (a + b)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) after clamping both images to [0,1], in dB.

    Exact matches (MSE below 1e-12) return the 99 dB cap.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred, 0.0, 1.0).astype(np.float64)
    t = np.clip(target, 0.0, 1.0).astype(np.float64)
    mse = float(np.mean((p - t) ** 2))
    if mse < 1e-12:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)
