"""Episode and task-kind types shared by the data generator and augmentations."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class TaskKind(enum.Enum):
    SEGMENTATION = "segmentation"
    MODALITY_TRANSFER = "modality_transfer"
    SUPER_RESOLUTION = "super_resolution"
    SKULL_STRIPPING = "skull_stripping"
    MOTION_RECON = "motion_recon"
    UNDERSAMPLED_RECON = "undersampled_recon"
    DENOISE_BIAS = "denoise_bias"
    INPAINTING = "inpainting"

    @classmethod
    def from_name(cls, name: str) -> "TaskKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown task kind {name!r}; valid: {[k.value for k in cls]}") from None


DICE_TASKS = frozenset({TaskKind.SEGMENTATION, TaskKind.SKULL_STRIPPING})


def loss_kind_for(task: TaskKind) -> str:
    return "dice" if task in DICE_TASKS else "mse"


@dataclass
class Episode:
    """One training/eval unit: input image, target, and the defining context set.

    The input is 3-channel with unused channels zero; the target is one
    channel (intensity image or binary mask). Context pairs are stored as
    parallel [N,3,H,W] / [N,1,H,W] arrays whose order is meaningful only
    for reproducibility; the model is invariant to it. Segmentation maps
    and brain masks of all involved subjects ride along so task
    augmentations can rewrite the episode coherently.
    """

    input: np.ndarray
    target: np.ndarray
    ctx_inputs: np.ndarray
    ctx_targets: np.ndarray
    task_kind: TaskKind
    loss_kind: str
    seg_map: np.ndarray | None = None
    brain_mask: np.ndarray | None = None
    ctx_seg_maps: list[np.ndarray] | None = None
    ctx_brain_masks: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.ctx_inputs.shape[0]
        if n < 1:
            raise ValueError("context set must contain at least one pair")
        if self.ctx_targets.shape[0] != n:
            raise ValueError("context inputs/targets disagree on N")
        h, w = self.input.shape[1:]
        for arr, name in ((self.target, "target"), (self.ctx_inputs, "ctx_inputs"),
                          (self.ctx_targets, "ctx_targets")):
            if arr.shape[-2:] != (h, w):
                raise ValueError(f"{name} extent {arr.shape[-2:]} != input extent {(h, w)}")
        if self.loss_kind == "dice" and not np.all((self.target == 0) | (self.target == 1)):
            raise ValueError("dice-task target must be binary")

    @property
    def context_size(self) -> int:
        return self.ctx_inputs.shape[0]

    def context_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.ctx_inputs[i], self.ctx_targets[i]) for i in range(self.context_size)]

    def context_stack(self) -> np.ndarray:
        """Channel-concatenated context encoding: [N, in+out channels, H, W]."""
        return np.concatenate([self.ctx_inputs, self.ctx_targets], axis=1)

    def with_arrays(self, **kw) -> "Episode":
        return replace(self, **kw)
