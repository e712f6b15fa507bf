"""Training loops for the context-conditioned model and task-specific baselines.

Each step samples a task kind by weight and a context size uniformly from
{1..N_max}, builds a batch of episodes, applies the augmentation tree,
and takes one Adam step on the task loss (soft Dice or weighted MSE).
Validation runs on a fixed pre-generated episode set; the best-validation
state (parameters, optimizer moments, RNG) is snapshotted and becomes the
returned checkpoint. Training stops at the step budget or after
`patience_epochs` validation intervals without improvement.
"""

from __future__ import annotations

import copy
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugTree, SpatialParams, apply_tree, baseline_tree, default_tree, spatial_augment_pair
from .checkpoint import Checkpoint
from .datagen import (
    PhantomConfig,
    SamplerConfig,
    available_modalities,
    build_episode,
    build_pair,
    draw_task_spec,
    make_pool,
    sample_context_size,
    sample_task_kind,
)
from .episode import TaskKind, loss_kind_for
from .losses import episode_loss
from .model import (
    BaselineConfig,
    ModelConfig,
    baseline_forward,
    baseline_param_shapes,
    forward,
    init_tensors,
    neuralizer_param_shapes,
    structure_baseline,
    structure_neuralizer,
)
from .optim import AdamState, adam_step, clip_global_norm, init_adam_state
from .tensor import Tape, Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class EarlyStopState:
    patience: int
    best_val: float = float("inf")
    epochs_since_improve: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def early_stop_update(state: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, bool]:
    """Strict improvements reset the counter; stop after `patience` flat epochs."""
    if not np.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
    return state, state.epochs_since_improve >= state.patience


@dataclass
class TrainConfig:
    steps_max: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    val_interval: int = 250
    patience_epochs: int = 25
    seed: int = 1234
    sigma2: float = 0.05
    grad_clip: float = 1.0
    pool_size: int = 64
    val_fraction: float = 0.2
    val_episodes: int = 256
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    augment_tree: AugTree | None = field(default_factory=default_tree)
    baseline_seg_classes: tuple[int, ...] = (2,)
    baseline_target_modality: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.model.image_size != self.phantom.image_size:
            raise ValueError("model and phantom image sizes disagree")


def make_pools(cfg: TrainConfig) -> tuple[list, list]:
    """Deterministic pool split by subject: no subject appears in both halves."""
    pool = make_pool(cfg.pool_size, cfg.phantom, base_seed=cfg.seed * 1_000_000 + 17)
    n_train = max(2, int(round(cfg.pool_size * (1.0 - cfg.val_fraction))))
    train_pool, val_pool = pool[:n_train], pool[n_train:]
    if len(val_pool) < 2:
        raise ValueError("pool too small for a train/val split")
    return train_pool, val_pool


def _stack_episodes(episodes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([ep.input for ep in episodes])
    y = np.stack([ep.target for ep in episodes])
    ctx = np.stack([ep.context_stack() for ep in episodes])      # (B,N,4,H,W)
    ctx = np.ascontiguousarray(ctx.transpose(1, 0, 2, 3, 4))     # (N,B,4,H,W)
    return x, ctx, y


def _build_batch(seed: int, kind: TaskKind, n_ctx: int, pool, sampler: SamplerConfig,
                 tree: AugTree | None, batch_size: int):
    rng = np.random.default_rng(seed)
    episodes = [build_episode(kind, pool, sampler, rng, context_size=n_ctx)
                for _ in range(batch_size)]
    if tree is not None:
        episodes = [apply_tree(ep, tree, int(rng.integers(2 ** 63))) for ep in episodes]
    return kind, _stack_episodes(episodes)


def build_validation_set(val_pool, cfg: TrainConfig, seed: int):
    """Fixed pre-generated validation episodes, grouped into homogeneous batches."""
    rng = np.random.default_rng(seed)
    batches = []
    n_batches = max(1, cfg.val_episodes // cfg.batch_size)
    for _ in range(n_batches):
        kind = sample_task_kind(cfg.sampler.task_weights, rng, cfg.sampler.holdout)
        n_ctx = sample_context_size(cfg.sampler, rng)
        episodes = [build_episode(kind, val_pool, cfg.sampler, rng, context_size=n_ctx)
                    for _ in range(cfg.batch_size)]
        batches.append((kind, _stack_episodes(episodes)))
    return batches


def _batch_loss(kind: TaskKind, arrays, params, sigma2: float) -> T.Tensor:
    x, ctx, y = arrays
    pred = forward(Tensor(x), Tensor(ctx), params)
    return episode_loss(pred, Tensor(y), loss_kind_for(kind), sigma2=sigma2)


def validate(batches, params, sigma2: float) -> float:
    total = 0.0
    for kind, arrays in batches:
        total += float(_batch_loss(kind, arrays, params, sigma2).data)
    return total / len(batches)


def _snapshot(tensors: dict[str, Tensor], adam: AdamState, rng: np.random.Generator,
              step: int, val: float) -> dict:
    return {
        "params": {n: t.data.copy() for n, t in tensors.items()},
        "m": {n: a.copy() for n, a in adam.m.items()},
        "v": {n: a.copy() for n, a in adam.v.items()},
        "adam_step": adam.step,
        "rng_state": copy.deepcopy(rng.bit_generator.state),
        "step": step,
        "val": val,
    }


def _checkpoint_from_snapshot(snap: dict, history: list, cfg: TrainConfig,
                              model_kind: str, model_config: dict,
                              meta: dict | None = None) -> Checkpoint:
    adam = AdamState(step=snap["adam_step"], m=snap["m"], v=snap["v"], lr=cfg.lr)
    return Checkpoint(
        model_kind=model_kind,
        model_config=model_config,
        params=snap["params"],
        adam=adam,
        step=snap["step"],
        best_val=snap["val"],
        rng_state=snap["rng_state"],
        history=history,
        holdout=None if cfg.sampler.holdout.empty() else cfg.sampler.holdout.to_dict(),
        meta=meta or {},
    )


def _restore(tensors: dict[str, Tensor], adam: AdamState, ckpt: Checkpoint) -> None:
    if set(ckpt.params) != set(tensors):
        raise ValueError("checkpoint parameters do not match the configured model")
    for name, t in tensors.items():
        t.data[...] = ckpt.params[name]
        adam.m[name][...] = ckpt.adam.m[name]
        adam.v[name][...] = ckpt.adam.v[name]
    adam.step = ckpt.adam.step


def _grads_by_name(grad_map, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in tensors.items():
        g = grad_map.get(t)
        out[name] = g if g is not None else np.zeros(t.shape, dtype=t.data.dtype)
    return out


def train_neuralizer(cfg: TrainConfig, resume: Checkpoint | None = None,
                     progress=None) -> Checkpoint:
    """Train the context-conditioned model; returns the best-validation checkpoint."""
    train_pool, val_pool = make_pools(cfg)
    val_batches = build_validation_set(val_pool, cfg, seed=cfg.seed + 1)

    tensors = init_tensors(neuralizer_param_shapes(cfg.model), seed=cfg.seed)
    params = structure_neuralizer(cfg.model, tensors)
    adam = init_adam_state(tensors, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    history: list[dict] = []
    if resume is not None:
        if resume.model_kind != "neuralizer":
            raise ValueError(f"cannot resume a {resume.model_kind!r} checkpoint")
        _restore(tensors, adam, resume)
        rng.bit_generator.state = resume.rng_state
        start_step = resume.step
        history = list(resume.history)

    stopper = EarlyStopState(patience=cfg.patience_epochs,
                             best_val=resume.best_val if resume else float("inf"))
    best = _snapshot(tensors, adam, rng, start_step, stopper.best_val)
    window: list[float] = []

    def run_step(arrays, kind) -> float:
        with Tape() as tape:
            loss = _batch_loss(kind, arrays, params, cfg.sigma2)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, loss_val)
        grad_map = tape.backward(loss)
        grads = _grads_by_name(grad_map, tensors)
        if cfg.grad_clip > 0:
            clip_global_norm(grads, cfg.grad_clip)
        adam_step(tensors, grads, adam)
        return loss_val

    def draws():
        kind = sample_task_kind(cfg.sampler.task_weights, rng, cfg.sampler.holdout)
        n_ctx = sample_context_size(cfg.sampler, rng)
        seed = int(rng.integers(2 ** 63))
        return seed, kind, n_ctx, train_pool, cfg.sampler, cfg.augment_tree, cfg.batch_size

    steps = range(start_step + 1, cfg.steps_max + 1)
    if cfg.workers > 1:
        # bounded prefetch: a few batches in flight, never the whole schedule
        pool_exec = ThreadPoolExecutor(max_workers=cfg.workers)
        pending: deque = deque()

        def batches():
            for _ in steps:
                pending.append(pool_exec.submit(_build_batch, *draws()))
                while len(pending) > cfg.workers + 2:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

        batch_iter = batches()
    else:
        pool_exec = None
        batch_iter = (_build_batch(*draws()) for _ in steps)

    step = start_step
    try:
        for step, (kind, arrays) in zip(steps, batch_iter):
            window.append(run_step(arrays, kind))
            if step % cfg.val_interval == 0 or step == cfg.steps_max:
                val = validate(val_batches, params, cfg.sigma2)
                train_mean = float(np.mean(window))
                window.clear()
                history.append({"step": step, "train_loss": train_mean, "val_loss": val})
                if progress is not None:
                    progress(step, train_mean, val)
                stopper, stop = early_stop_update(stopper, val)
                if val <= stopper.best_val:
                    best = _snapshot(tensors, adam, rng, step, val)
                if stop:
                    break
    finally:
        if pool_exec is not None:
            pool_exec.shutdown(wait=False, cancel_futures=True)

    if best["step"] == start_step and step > start_step:
        # no validation interval ever completed; keep the final state
        best = _snapshot(tensors, adam, rng, step, float("inf"))
    return _checkpoint_from_snapshot(
        best, history, cfg, "neuralizer", asdict(cfg.model),
        meta={"task_weights": {k.value: v for k, v in cfg.sampler.task_weights.items()},
              "seed": cfg.seed})


# ---------------------------------------------------------------------------
# task-specific baselines


def baseline_replicates(n_subjects: int) -> int:
    """Replication rule for small training sets: 3 runs at n=1, 2 at n=2, else 1."""
    if n_subjects == 1:
        return 3
    if n_subjects == 2:
        return 2
    return 1


def baseline_frozen_for(task: TaskKind, cfg: TrainConfig) -> dict:
    """Pin the task identity a single baseline model is trained to solve."""
    if task is TaskKind.SEGMENTATION:
        return {"classes": list(cfg.baseline_seg_classes)}
    if task is TaskKind.MODALITY_TRANSFER:
        return {"target_mod": cfg.baseline_target_modality}
    return {}


def _baseline_batch(seed: int, task: TaskKind, subjects, mods, sampler: SamplerConfig,
                    frozen: dict, batch_size: int, spatial: SpatialParams | None):
    rng = np.random.default_rng(seed)
    mask_target = loss_kind_for(task) == "dice"
    xs, ys = [], []
    for _ in range(batch_size):
        subj = subjects[int(rng.integers(len(subjects)))]
        spec = draw_task_spec(task, mods, sampler, rng, frozen)
        inp, tgt = build_pair(subj, spec, rng)
        if spatial is not None:
            inp, tgt = spatial_augment_pair(
                inp, tgt, mask_target, spatial, rng,
                allow_flip=task is not TaskKind.SEGMENTATION)
        xs.append(inp)
        ys.append(tgt)
    return np.stack(xs), np.stack(ys)


def train_baseline(task: TaskKind, n_subjects: int, cfg: TrainConfig,
                   replicate: int = 0, progress=None) -> Checkpoint:
    """Train one task-specific U-Net on a fixed subset of n training subjects.

    Standard (spatial) augmentations only; task augmentations that alter
    the desired output are not used for baselines.
    """
    train_pool, val_pool = make_pools(cfg)
    if n_subjects > len(train_pool):
        raise ValueError(f"n_subjects {n_subjects} exceeds training pool {len(train_pool)}")
    rng = np.random.default_rng(cfg.seed + 7919 * (replicate + 1))
    subject_idx = rng.choice(len(train_pool), size=n_subjects, replace=False)
    subjects = [train_pool[int(i)] for i in subject_idx]
    mods = available_modalities(train_pool, cfg.sampler.holdout)
    frozen = baseline_frozen_for(task, cfg)
    spatial = SpatialParams()

    tensors = init_tensors(baseline_param_shapes(cfg.baseline), seed=cfg.seed + replicate)
    params = structure_baseline(cfg.baseline, tensors)
    adam = init_adam_state(tensors, lr=cfg.lr)

    n_val_batches = max(1, min(16, cfg.val_episodes // cfg.batch_size))
    val_batches = [
        _baseline_batch(int(rng.integers(2 ** 63)), task, val_pool, mods, cfg.sampler,
                        frozen, cfg.batch_size, spatial=None)
        for _ in range(n_val_batches)
    ]

    def batch_loss(x, y):
        pred = baseline_forward(Tensor(x), params)
        return episode_loss(pred, Tensor(y), loss_kind_for(task), sigma2=cfg.sigma2)

    stopper = EarlyStopState(patience=cfg.patience_epochs)
    best = _snapshot(tensors, adam, rng, 0, float("inf"))
    history: list[dict] = []
    window: list[float] = []
    step = 0
    for step in range(1, cfg.steps_max + 1):
        x, y = _baseline_batch(int(rng.integers(2 ** 63)), task, subjects, mods,
                               cfg.sampler, frozen, cfg.batch_size, spatial)
        with Tape() as tape:
            loss = batch_loss(x, y)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, loss_val)
        grad_map = tape.backward(loss)
        grads = _grads_by_name(grad_map, tensors)
        if cfg.grad_clip > 0:
            clip_global_norm(grads, cfg.grad_clip)
        adam_step(tensors, grads, adam)
        window.append(loss_val)

        if step % cfg.val_interval == 0 or step == cfg.steps_max:
            val = float(np.mean([float(batch_loss(x, y).data) for x, y in val_batches]))
            train_mean = float(np.mean(window))
            window.clear()
            history.append({"step": step, "train_loss": train_mean, "val_loss": val})
            if progress is not None:
                progress(step, train_mean, val)
            stopper, stop = early_stop_update(stopper, val)
            if val <= stopper.best_val:
                best = _snapshot(tensors, adam, rng, step, val)
            if stop:
                break

    if not np.isfinite(best["val"]) and step > 0:
        best = _snapshot(tensors, adam, rng, step, float("inf"))
    return _checkpoint_from_snapshot(
        best, history, cfg, "baseline", asdict(cfg.baseline),
        meta={"task": task.value, "n_subjects": n_subjects, "replicate": replicate,
              "frozen": frozen, "subject_ids": [s.subject_id for s in subjects],
              "seed": cfg.seed})
