"""Procedural phantom subjects, corruption simulators, and the episode sampler."""

from .phantom import (
    ANATOMY_LABELS,
    PhantomConfig,
    PhantomSubject,
    generate_phantom,
    load_pool,
    make_pool,
    save_pool,
)
from .kspace import corrupt, fft2, perlin_mask
from .sampler import (
    DEFAULT_TASK_WEIGHTS,
    MODALITY_LOCKED,
    Holdout,
    InsufficientPoolError,
    SamplerConfig,
    TaskSpec,
    available_modalities,
    build_episode,
    build_pair,
    draw_task_spec,
    sample_context_size,
    sample_task_kind,
)

__all__ = [
    "ANATOMY_LABELS",
    "PhantomConfig",
    "PhantomSubject",
    "generate_phantom",
    "make_pool",
    "save_pool",
    "load_pool",
    "fft2",
    "corrupt",
    "perlin_mask",
    "DEFAULT_TASK_WEIGHTS",
    "MODALITY_LOCKED",
    "Holdout",
    "InsufficientPoolError",
    "SamplerConfig",
    "TaskSpec",
    "available_modalities",
    "build_episode",
    "build_pair",
    "draw_task_spec",
    "sample_context_size",
    "sample_task_kind",
]
