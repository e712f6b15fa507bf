"""Inference, context-set bootstrapping, and the experiment harness.

Evaluation is paired: every model in a report sees byte-identical episodes,
generated from per-cell seed sequences. Dice (on 0.5-thresholded masks) is
reported for segmentation-like tasks and PSNR (on [0,1]-clamped images)
for everything else. Reports serialize to CSV in a canonical row order so
equal seeds give equal bytes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .augment import SpatialParams, spatial_augment_pair
from .checkpoint import Checkpoint
from .datagen import Holdout, SamplerConfig, build_episode
from .episode import Episode, TaskKind, loss_kind_for
from .losses import dice_coefficient, psnr, threshold_mask
from .model import (
    BaselineConfig,
    BaselineUNetParams,
    ModelConfig,
    NeuralizerParams,
    baseline_forward,
    forward,
    structure_baseline,
    structure_neuralizer,
)
from .ntf import write_pgm
from .tensor import Tensor


def params_from_checkpoint(ckpt: Checkpoint):
    """Rebuild structured inference parameters from stored tensors."""
    tensors = {name: Tensor(arr.copy()) for name, arr in ckpt.params.items()}
    if ckpt.model_kind == "neuralizer":
        return structure_neuralizer(ModelConfig(**ckpt.model_config), tensors)
    if ckpt.model_kind == "baseline":
        return structure_baseline(BaselineConfig(**ckpt.model_config), tensors)
    raise ValueError(f"unknown model kind {ckpt.model_kind!r}")


@dataclass
class Prediction:
    logits: np.ndarray            # (1,H,W)
    mask: np.ndarray | None = None


def infer(x: np.ndarray, ctx: np.ndarray, params: NeuralizerParams,
          dice: bool = False) -> Prediction:
    """Single feed-forward pass on one episode; no test-time augmentation."""
    if ctx.ndim != 4 or ctx.shape[0] < 1:
        raise ValueError("context must be a non-empty [N,4,H,W] stack")
    out = forward(Tensor(x[None]), Tensor(ctx[:, None]), params).data[0]
    return Prediction(out, threshold_mask(out) if dice else None)


def infer_baseline(x: np.ndarray, params: BaselineUNetParams, dice: bool = False) -> Prediction:
    out = baseline_forward(Tensor(x[None]), params).data[0]
    return Prediction(out, threshold_mask(out) if dice else None)


def infer_bootstrap(x: np.ndarray, ctx: np.ndarray, params: NeuralizerParams,
                    B: int = 8, rng: np.random.Generator | None = None,
                    dice: bool = False, jitter_deg: float = 2.0,
                    jitter_px: float = 2.0, resample: bool = True) -> Prediction:
    """Average B forward passes over resampled, jittered context sets.

    Each replicate resamples the context with replacement to its original
    size and perturbs every pair with a small affine transform; soft
    predictions are averaged pixelwise and dice tasks threshold after
    averaging.
    """
    if B < 1:
        raise ValueError("bootstrap requires B >= 1")
    if ctx.ndim != 4 or ctx.shape[0] < 1:
        raise ValueError("context must be a non-empty [N,4,H,W] stack")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = ctx.shape[0]
    jitter = SpatialParams(rotate_deg=jitter_deg, translate_px=jitter_px,
                           scale=(1.0, 1.0), elastic_prob=0.0, flip_prob=0.0)
    preds = []
    for _ in range(B):
        idx = rng.integers(0, n, size=n) if resample else np.arange(n)
        replica = np.empty_like(ctx)
        for j, i in enumerate(idx):
            ci, ct = spatial_augment_pair(ctx[i, :3], ctx[i, 3:], dice, jitter, rng,
                                          allow_flip=False)
            replica[j, :3] = ci
            replica[j, 3:] = ct
        preds.append(forward(Tensor(x[None]), Tensor(replica[:, None]), params).data[0])
    out = np.mean(np.stack(preds), axis=0, dtype=np.float64).astype(np.float32)
    return Prediction(out, threshold_mask(out) if dice else None)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    model: str
    task: str
    holdout: str
    n: int
    metric: str
    mean: float
    std: float
    episodes: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[EvalRow]:
        return sorted(self.rows, key=lambda r: (r.model, r.task, r.n, r.metric))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("model,task,holdout,n,metric,mean,std,episodes\n")
        for r in self.sorted_rows():
            out.write(f"{r.model},{r.task},{r.holdout},{r.n},{r.metric},"
                      f"{r.mean:.6f},{r.std:.6f},{r.episodes}\n")
        return out.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv())

    def cell(self, model: str, task: str, n: int) -> EvalRow:
        for r in self.rows:
            if r.model == model and r.task == task and r.n == n:
                return r
        raise KeyError(f"no report cell ({model}, {task}, {n})")


def _holdout_label(ckpt: Checkpoint) -> str:
    if not ckpt.holdout:
        return "-"
    h = Holdout.from_dict(ckpt.holdout)
    parts = [f"task:{t.value}" for t in sorted(h.tasks, key=lambda t: t.value)]
    parts += [f"modality:{m}" for m in sorted(h.modalities)]
    parts += [f"class:{c}" for c in sorted(h.classes)]
    return "+".join(parts) if parts else "-"


def _metric_for(task: TaskKind) -> str:
    return "dice" if loss_kind_for(task) == "dice" else "psnr"


def _episode_metric(pred: Prediction, ep: Episode) -> float:
    if ep.loss_kind == "dice":
        return dice_coefficient(pred.mask, ep.target)
    return psnr(pred.logits, ep.target)


def _cell_episodes(task: TaskKind, n: int, count: int, pool, sampler: SamplerConfig,
                   seed: int, frozen: dict | None) -> list[Episode]:
    task_tag = sorted(k.value for k in TaskKind).index(task.value)
    return [
        build_episode(task, pool,
                      sampler,
                      np.random.default_rng(np.random.SeedSequence([seed, task_tag, n, e])),
                      context_size=n, frozen=frozen)
        for e in range(count)
    ]


def eval_curves(models: dict[str, Checkpoint], tasks, pool,
                sizes=(1, 2, 4, 8), episodes_per_cell: int = 50, seed: int = 0,
                sampler: SamplerConfig | None = None,
                baselines: dict[tuple[TaskKind, int], list[Checkpoint]] | None = None,
                frozen_by_task: dict[TaskKind, dict] | None = None,
                bootstrap: int = 0, workers: int = 1) -> EvalReport:
    """Metric as a function of context size, paired across all models.

    `models` are context-conditioned checkpoints evaluated at each context
    size; `baselines` maps (task, n) to the replicate checkpoints of a
    task-specific model trained on n subjects, evaluated context-free on
    the same episodes and averaged across replicates. Cells are
    independent and may run on `workers` threads; rows come back in a
    canonical order either way.
    """
    if episodes_per_cell < 20:
        raise ValueError("every report cell must aggregate at least 20 episodes")
    sampler = sampler or SamplerConfig()
    frozen_by_task = frozen_by_task or {}
    structured = {mid: params_from_checkpoint(c) for mid, c in models.items()}
    base_structs = {key: [params_from_checkpoint(c) for c in reps]
                    for key, reps in (baselines or {}).items()}
    norm_tasks = [TaskKind.from_name(t) if isinstance(t, str) else t for t in tasks]
    if baselines is not None:
        for task in norm_tasks:
            for n in sizes:
                if (task, n) not in baselines:
                    raise KeyError(
                        f"missing baseline checkpoint cell for {task.value} at n={n}")

    def run_cell(task: TaskKind, n: int) -> list[EvalRow]:
        metric = _metric_for(task)
        dice = metric == "dice"
        episodes = _cell_episodes(task, n, episodes_per_cell, pool, sampler, seed,
                                  frozen_by_task.get(task))
        cell_rows: list[EvalRow] = []
        for mid, ckpt in models.items():
            params = structured[mid]
            scores = []
            for e_idx, ep in enumerate(episodes):
                ctx = ep.context_stack()
                if bootstrap > 0:
                    rng = np.random.default_rng(
                        np.random.SeedSequence([seed, 7, n, e_idx]))
                    pred = infer_bootstrap(ep.input, ctx, params, B=bootstrap,
                                           rng=rng, dice=dice)
                else:
                    pred = infer(ep.input, ctx, params, dice=dice)
                scores.append(_episode_metric(pred, ep))
            cell_rows.append(EvalRow(mid, task.value, _holdout_label(ckpt), n, metric,
                                     float(np.mean(scores)), float(np.std(scores)),
                                     len(scores)))
        if baselines is not None:
            scores = []
            for ep in episodes:
                reps = [_episode_metric(infer_baseline(ep.input, p, dice=dice), ep)
                        for p in base_structs[(task, n)]]
                scores.append(float(np.mean(reps)))
            cell_rows.append(EvalRow("baseline", task.value, "-", n, metric,
                                     float(np.mean(scores)), float(np.std(scores)),
                                     len(scores)))
        return cell_rows

    cells = [(task, n) for task in norm_tasks for n in sizes]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda c: run_cell(*c), cells))
    else:
        results = [run_cell(*c) for c in cells]
    rows = [row for cell_rows in results for row in cell_rows]
    return EvalReport(rows=rows, meta={"seed": seed, "episodes_per_cell": episodes_per_cell})


def holdout_compare(seen_ckpt: Checkpoint, unseen_ckpt: Checkpoint, holdout: Holdout,
                    pool, sizes=(4,), episodes_per_cell: int = 50, seed: int = 0,
                    sampler: SamplerConfig | None = None,
                    bootstrap: int = 0) -> EvalReport:
    """Seen-vs-unseen comparison on held-out episodes only.

    The unseen checkpoint must record the requested holdout; the seen one
    must not. The report carries per-size seen-minus-unseen gaps in meta.
    """
    recorded = Holdout.from_dict(unseen_ckpt.holdout)
    if not (holdout.tasks <= recorded.tasks and holdout.modalities <= recorded.modalities
            and holdout.classes <= recorded.classes):
        raise ValueError("unseen checkpoint does not record the requested holdout")
    seen_recorded = Holdout.from_dict(seen_ckpt.holdout)
    if (holdout.tasks & seen_recorded.tasks or holdout.modalities & seen_recorded.modalities
            or holdout.classes & seen_recorded.classes):
        raise ValueError("seen checkpoint also holds out the requested item")

    if holdout.classes:
        task = TaskKind.SEGMENTATION
        frozen = {"classes": sorted(holdout.classes)}
    elif holdout.tasks:
        task = sorted(holdout.tasks, key=lambda t: t.value)[0]
        frozen = None
    elif holdout.modalities:
        task = TaskKind.SEGMENTATION
        frozen = {"chan_mods": sorted(holdout.modalities)}
    else:
        raise ValueError("empty holdout request")

    report = eval_curves({"seen": seen_ckpt, "unseen": unseen_ckpt}, [task], pool,
                         sizes=sizes, episodes_per_cell=episodes_per_cell, seed=seed,
                         sampler=sampler, frozen_by_task={task: frozen} if frozen else None,
                         bootstrap=bootstrap)
    gaps = {}
    for n in sizes:
        seen_row = report.cell("seen", task.value, n)
        unseen_row = report.cell("unseen", task.value, n)
        gaps[n] = seen_row.mean - unseen_row.mean
    report.meta["gaps"] = gaps
    report.meta["holdout"] = holdout.to_dict()
    return report


# ---------------------------------------------------------------------------
# preview images


def montage(tiles: list[np.ndarray], cols: int, pad: int = 1) -> np.ndarray:
    """Arrange equal-size [0,1] tiles into a grid with thin separators."""
    h, w = tiles[0].shape
    rows = (len(tiles) + cols - 1) // cols
    out = np.ones((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad),
                  dtype=np.float32)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = r * (h + pad), c * (w + pad)
        out[y:y + h, x:x + w] = np.clip(tile, 0.0, 1.0)
    return out


def episode_montage(ep: Episode, pred: np.ndarray | None = None) -> np.ndarray:
    """Input channels, target (and prediction) on top; context pairs below."""
    tiles = [ep.input[c] for c in range(ep.input.shape[0])] + [ep.target[0]]
    if pred is not None:
        tiles.append(pred[0])
    cols = len(tiles)
    for i in range(ep.context_size):
        row = [ep.ctx_inputs[i, c] for c in range(ep.ctx_inputs.shape[1])]
        row.append(ep.ctx_targets[i, 0])
        row += [np.zeros_like(ep.target[0])] * (cols - len(row))
        tiles += row
    return montage(tiles, cols)


def dump_episode_pgms(ep: Episode, out_dir, stem: str,
                      pred: np.ndarray | None = None) -> list[str]:
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, img):
        path = out_dir / f"{stem}_{name}.pgm"
        write_pgm(path, img)
        written.append(str(path))

    for c in range(ep.input.shape[0]):
        put(f"input_c{c}", ep.input[c])
    put("target", ep.target[0])
    if pred is not None:
        put("prediction", pred[0])
    put("context", episode_montage(ep, pred))
    return written
