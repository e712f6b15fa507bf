"""Training-episode construction: task sampling, dataset mixing, per-task recipes.

An episode is assembled in two steps: a `TaskSpec` fixes the episode-level
task identity (which classes to segment, which modality to produce, how
severe the corruption is), then every member pair (input and context alike)
is built from its own subject with that one spec, so all pairs exemplify
the same transformation by construction. Context subjects follow the
dataset-mixing rule (same dataset as the input / any / input's dataset
excluded, 1/3 each) and the input subject never appears in its own context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..episode import Episode, TaskKind, loss_kind_for
from .kspace import corrupt, perlin_mask
from .phantom import ANATOMY_LABELS, PhantomSubject

DEFAULT_TASK_WEIGHTS: dict[TaskKind, float] = {
    TaskKind.SEGMENTATION: 2.0,
    TaskKind.MODALITY_TRANSFER: 2.0,
    TaskKind.SUPER_RESOLUTION: 1.0,
    TaskKind.SKULL_STRIPPING: 0.5,
    TaskKind.MOTION_RECON: 0.5,
    TaskKind.DENOISE_BIAS: 0.5,
    TaskKind.UNDERSAMPLED_RECON: 1.0,
    TaskKind.INPAINTING: 1.0,
}

_CORRUPTION_FOR = {
    TaskKind.MOTION_RECON: "motion",
    TaskKind.UNDERSAMPLED_RECON: "undersample",
    TaskKind.DENOISE_BIAS: "noise",
}

# Tasks where context members must use the exact modalities of the input;
# for all other tasks the context modality may vary from the input image.
MODALITY_LOCKED = frozenset({TaskKind.SEGMENTATION, TaskKind.MODALITY_TRANSFER})


class InsufficientPoolError(ValueError):
    pass


@dataclass
class Holdout:
    """Task kinds, modality ids, or segmentation class ids excluded from training."""

    tasks: frozenset = frozenset()
    modalities: frozenset = frozenset()
    classes: frozenset = frozenset()

    def __post_init__(self):
        self.tasks = frozenset(TaskKind.from_name(t) if isinstance(t, str) else t
                               for t in self.tasks)
        self.modalities = frozenset(int(m) for m in self.modalities)
        self.classes = frozenset(int(c) for c in self.classes)
        unknown = self.classes - set(ANATOMY_LABELS)
        if unknown:
            raise ValueError(f"held-out classes {sorted(unknown)} are not anatomy labels")

    def empty(self) -> bool:
        return not (self.tasks or self.modalities or self.classes)

    def to_dict(self) -> dict:
        return {"tasks": sorted(t.value for t in self.tasks),
                "modalities": sorted(self.modalities),
                "classes": sorted(self.classes)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "Holdout":
        d = d or {}
        return cls(tasks=frozenset(d.get("tasks", ())),
                   modalities=frozenset(d.get("modalities", ())),
                   classes=frozenset(d.get("classes", ())))


@dataclass
class SamplerConfig:
    task_weights: dict[TaskKind, float] = field(
        default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    context_size_max: int = 8
    mixing_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    holdout: Holdout = field(default_factory=Holdout)
    seg_subset_sizes: tuple[int, ...] = (1, 2, 3)
    sr_factors: tuple[int, ...] = (2, 4)
    severity_range: tuple[float, float] = (0.25, 1.0)
    bias_prob: float = 0.5

    def __post_init__(self):
        if any(w < 0 for w in self.task_weights.values()):
            raise ValueError("task weights must be non-negative")
        if not any(w > 0 for w in self.task_weights.values()):
            raise ValueError("at least one task weight must be positive")
        if self.context_size_max < 1:
            raise ValueError("context_size_max must be >= 1")
        if abs(sum(self.mixing_probs) - 1.0) > 1e-9:
            raise ValueError("mixing probabilities must sum to 1")


@dataclass
class TaskSpec:
    """Episode-level task identity, shared by the input and all context pairs."""

    kind: TaskKind
    chan_mods: list[int]
    classes: list[int] | None = None
    target_mod: int | None = None
    sr_factor: int | None = None
    severity: float = 0.0
    with_bias: bool = False

    def meta(self) -> dict:
        out = {"modalities": list(self.chan_mods)}
        if self.classes is not None:
            out["classes"] = list(self.classes)
        if self.target_mod is not None:
            out["target_modality"] = self.target_mod
        if self.sr_factor is not None:
            out["sr_factor"] = self.sr_factor
        if self.kind in _CORRUPTION_FOR:
            out["severity"] = self.severity
            out["with_bias"] = self.with_bias
        return out


def sample_task_kind(weights: dict[TaskKind, float], rng: np.random.Generator,
                     holdout: Holdout | None = None) -> TaskKind:
    """Categorical draw proportional to weights, excluding held-out tasks."""
    holdout = holdout or Holdout()
    kinds = [k for k, w in weights.items() if w > 0 and k not in holdout.tasks]
    if not kinds:
        raise ValueError("no task kind has positive weight after holdout exclusion")
    w = np.array([weights[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=w / w.sum()))]


def sample_context_size(cfg: SamplerConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(1, cfg.context_size_max + 1))


def available_modalities(pool: list[PhantomSubject], holdout: Holdout) -> list[int]:
    n_mod = pool[0].modalities.shape[0]
    mods = [m for m in range(n_mod) if m not in holdout.modalities]
    if not mods:
        raise ValueError("modality holdout removes every modality")
    return mods


def draw_task_spec(kind: TaskKind, mods: list[int], cfg: SamplerConfig,
                   rng: np.random.Generator, frozen: dict | None = None) -> TaskSpec:
    """Sample the episode-level task identity; `frozen` pins chosen fields.

    Freezing is how task-specific baselines get a fixed task to learn
    (e.g. always the same segmentation class subset or target modality).
    """
    frozen = frozen or {}
    spec = TaskSpec(kind=kind, chan_mods=[])

    if kind is TaskKind.SEGMENTATION:
        classes_avail = [c for c in ANATOMY_LABELS if c not in cfg.holdout.classes]
        if not classes_avail:
            raise ValueError("class holdout removes every segmentation class")
        if "classes" in frozen:
            spec.classes = sorted(int(c) for c in frozen["classes"])
        else:
            k = min(int(rng.choice(cfg.seg_subset_sizes)), len(classes_avail))
            spec.classes = sorted(rng.choice(classes_avail, size=k, replace=False).tolist())
        m = min(int(rng.integers(1, 4)), len(mods))
        spec.chan_mods = sorted(rng.choice(mods, size=m, replace=False).tolist())

    elif kind is TaskKind.SKULL_STRIPPING:
        m = min(int(rng.integers(1, 4)), len(mods))
        spec.chan_mods = sorted(rng.choice(mods, size=m, replace=False).tolist())

    elif kind is TaskKind.MODALITY_TRANSFER:
        if len(mods) < 2:
            raise ValueError("modality transfer needs at least two available modalities")
        spec.target_mod = int(frozen.get("target_mod", rng.choice(mods)))
        in_avail = [c for c in mods if c != spec.target_mod]
        if not in_avail:
            raise ValueError("no input modalities left after choosing the target")
        m = min(int(rng.integers(1, 4)), len(in_avail))
        spec.chan_mods = sorted(rng.choice(in_avail, size=m, replace=False).tolist())

    elif kind is TaskKind.SUPER_RESOLUTION:
        spec.sr_factor = int(frozen.get("sr_factor", rng.choice(list(cfg.sr_factors))))
        spec.chan_mods = [int(rng.choice(mods))]

    elif kind in _CORRUPTION_FOR:
        spec.severity = float(rng.uniform(*cfg.severity_range))
        spec.with_bias = (kind is TaskKind.DENOISE_BIAS and rng.random() < cfg.bias_prob)
        spec.chan_mods = [int(rng.choice(mods))]

    elif kind is TaskKind.INPAINTING:
        spec.chan_mods = [int(rng.choice(mods))]

    else:
        raise ValueError(f"unhandled task kind {kind}")

    if "chan_mods" in frozen:
        pinned = sorted(int(m) for m in frozen["chan_mods"])
        bad = [m for m in pinned if m not in mods or m == spec.target_mod]
        if bad:
            raise ValueError(f"frozen input modalities {bad} are not available")
        spec.chan_mods = pinned
    return spec


def _encode_input(channels: list[np.ndarray], size: int) -> np.ndarray:
    """Stack up to three channels into the fixed 3-channel encoding."""
    out = np.zeros((3, size, size), dtype=np.float32)
    for i, ch in enumerate(channels[:3]):
        out[i] = ch
    return out


def build_pair(subject: PhantomSubject, spec: TaskSpec, rng: np.random.Generator,
               modality_override: list[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One (input, target) pair realizing `spec` on a subject."""
    size = subject.image_size
    mods = modality_override if modality_override is not None else spec.chan_mods
    kind = spec.kind

    if kind is TaskKind.SEGMENTATION:
        inp = _encode_input([subject.modalities[c] for c in mods], size)
        tgt = np.isin(subject.seg_map, spec.classes).astype(np.float32)[None]
        return inp, tgt

    if kind is TaskKind.SKULL_STRIPPING:
        inp = _encode_input([subject.modalities[c] for c in mods], size)
        return inp, subject.brain_mask[None].astype(np.float32)

    if kind is TaskKind.MODALITY_TRANSFER:
        inp = _encode_input([subject.modalities[c] for c in mods], size)
        return inp, subject.modalities[spec.target_mod][None].copy()

    img = subject.modalities[mods[0]]

    if kind is TaskKind.SUPER_RESOLUTION:
        f = spec.sr_factor
        coarse = img.reshape(size // f, f, size // f, f).mean(axis=(1, 3))
        low = np.repeat(np.repeat(coarse, f, axis=0), f, axis=1)
        return _encode_input([low], size), img[None].copy()

    if kind in _CORRUPTION_FOR:
        out = corrupt(img, _CORRUPTION_FOR[kind], spec.severity, rng)
        if spec.with_bias:
            out = corrupt(out, "bias", spec.severity, rng)
        return _encode_input([out], size), img[None].copy()

    if kind is TaskKind.INPAINTING:
        hole = perlin_mask(img.shape, cell=8, rng=rng)
        return _encode_input([img * (1.0 - hole), hole], size), img[None].copy()

    raise ValueError(f"unhandled task kind {kind}")


def _pick_context_subjects(pool: list[PhantomSubject], input_idx: int, n: int,
                           cfg: SamplerConfig, rng: np.random.Generator) -> tuple[list[int], str]:
    """Apply the dataset-mixing rule; never returns the input subject."""
    input_ds = pool[input_idx].dataset_id
    r = rng.random()
    p_same, p_any = cfg.mixing_probs[0], cfg.mixing_probs[1]
    if r < p_same:
        mode = "same"
        candidates = [i for i, s in enumerate(pool)
                      if s.dataset_id == input_ds and i != input_idx]
        if not candidates:  # lone subject of its dataset: fall back to any other
            mode = "any"
            candidates = [i for i in range(len(pool)) if i != input_idx]
    elif r < p_same + p_any:
        mode = "any"
        candidates = [i for i in range(len(pool)) if i != input_idx]
    else:
        mode = "exclude"
        candidates = [i for i, s in enumerate(pool)
                      if s.dataset_id != input_ds and i != input_idx]
        if not candidates:  # single-dataset pool: fall back to any other subject
            mode = "any"
            candidates = [i for i in range(len(pool)) if i != input_idx]
    if not candidates:
        raise InsufficientPoolError(
            f"no context candidates for subject {input_idx} under mixing mode {mode!r}")
    replace = len(candidates) < n
    picks = rng.choice(len(candidates), size=n, replace=replace)
    return [candidates[int(i)] for i in picks], mode


def build_episode(kind: TaskKind, pool: list[PhantomSubject], cfg: SamplerConfig,
                  rng: np.random.Generator, context_size: int | None = None,
                  frozen: dict | None = None) -> Episode:
    """Construct one episode of the given task kind from the subject pool."""
    if len(pool) < 2:
        raise InsufficientPoolError("need at least 2 subjects (input + context)")
    if kind in cfg.holdout.tasks:
        raise ValueError(f"task {kind.value} is held out")
    n = context_size if context_size is not None else sample_context_size(cfg, rng)
    if n < 1:
        raise ValueError("context size must be >= 1")

    mods = available_modalities(pool, cfg.holdout)
    input_idx = int(rng.integers(len(pool)))
    ctx_idx, mixing = _pick_context_subjects(pool, input_idx, n, cfg, rng)
    subj = pool[input_idx]
    ctx_subjects = [pool[i] for i in ctx_idx]

    spec = draw_task_spec(kind, mods, cfg, rng, frozen)
    inp, tgt = build_pair(subj, spec, rng)

    vary = kind not in MODALITY_LOCKED
    ctx_in_list, ctx_tg_list, ctx_mods = [], [], []
    for s in ctx_subjects:
        if vary:
            override = sorted(rng.choice(mods, size=len(spec.chan_mods),
                                         replace=False).tolist())
        else:
            override = None
        ci, ct = build_pair(s, spec, rng, modality_override=override)
        ctx_in_list.append(ci)
        ctx_tg_list.append(ct)
        ctx_mods.append(override if override is not None else list(spec.chan_mods))

    meta = {
        "task": kind.value,
        "input_subject": subj.subject_id,
        "ctx_subjects": [s.subject_id for s in ctx_subjects],
        "mixing": mixing,
        "input_dataset": subj.dataset_id,
        "ctx_datasets": [s.dataset_id for s in ctx_subjects],
        "ctx_modalities": ctx_mods,
    }
    meta.update(spec.meta())

    return Episode(
        input=inp,
        target=tgt,
        ctx_inputs=np.stack(ctx_in_list),
        ctx_targets=np.stack(ctx_tg_list),
        task_kind=kind,
        loss_kind=loss_kind_for(kind),
        seg_map=subj.seg_map,
        brain_mask=subj.brain_mask,
        ctx_seg_maps=[s.seg_map for s in ctx_subjects],
        ctx_brain_masks=[s.brain_mask for s in ctx_subjects],
        meta=meta,
    )
