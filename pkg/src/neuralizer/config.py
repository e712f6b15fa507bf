"""Run configuration: JSON documents with strict keys and materialized defaults.

A run config has sections model, sampler, train, augment_tree, eval,
paths, plus a top-level seed. Loading merges the file over the defaults,
rejecting unknown keys at every level, and the fully materialized document
is echoed into the run directory for provenance. The NEURALIZER_SEED
environment variable overrides the config seed.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .augment import AugTree, default_tree
from .datagen import DEFAULT_TASK_WEIGHTS, Holdout, PhantomConfig, SamplerConfig
from .episode import TaskKind
from .model import BaselineConfig, ModelConfig
from .train import TrainConfig

ENV_SEED = "NEURALIZER_SEED"


class ConfigError(ValueError):
    pass


def default_run_config() -> dict:
    return {
        "seed": 1234,
        "model": {
            "channels": 16,
            "stages": 4,
            "in_channels": 3,
            "ctx_pair_channels": 4,
            "out_channels": 1,
            "image_size": 32,
        },
        "sampler": {
            "task_weights": {k.value: w for k, w in DEFAULT_TASK_WEIGHTS.items()},
            "context_size_max": 8,
            "mixing_probs": [1 / 3, 1 / 3, 1 / 3],
            "holdout": {"tasks": [], "modalities": [], "classes": []},
            "seg_subset_sizes": [1, 2, 3],
            "sr_factors": [2, 4],
            "severity_range": [0.25, 1.0],
            "bias_prob": 0.5,
        },
        "train": {
            "steps_max": 5000,
            "batch_size": 8,
            "lr": 1e-4,
            "val_interval": 250,
            "patience_epochs": 25,
            "sigma2": 0.05,
            "grad_clip": 1.0,
            "pool_size": 64,
            "val_fraction": 0.2,
            "val_episodes": 256,
            "workers": 1,
            "baseline": {"width": 16, "stages": 4, "in_channels": 3,
                         "out_channels": 1, "image_size": 32},
            "baseline_seg_classes": [2],
            "baseline_target_modality": 0,
            "phantom": {"image_size": 32, "n_modalities": 4, "n_datasets": 3},
        },
        "augment_tree": default_tree().to_dict(),
        "eval": {
            "tasks": [k.value for k in TaskKind],
            "sizes": [1, 2, 4, 8],
            "episodes_per_cell": 50,
            "bootstrap": 0,
            "dump_pgm": False,
            "pool_size": 32,
            "pool_seed": 900000,
        },
        "paths": {"run_dir": "runs/default"},
    }


def _merge(defaults, override, path: str):
    if isinstance(defaults, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: expected an object")
        open_keyed = path.endswith("task_weights")  # keys are task names, not fields
        unknown = set(override) - set(defaults) if not open_keyed else set()
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        out = copy.deepcopy(defaults)
        for key, value in override.items():
            base = defaults.get(key)
            if isinstance(base, dict) and path.split(".")[-1] != "augment_tree":
                out[key] = _merge(base, value, f"{path}.{key}")
            else:
                out[key] = copy.deepcopy(value)
        return out
    return copy.deepcopy(override)


def load_run_config(path: str | Path, env: dict | None = None) -> dict:
    """Read a JSON run config, merge over defaults, apply the env seed override."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    defaults = default_run_config()
    # augment_tree replaces wholesale (its schema is validated by AugTree)
    if "augment_tree" in doc:
        defaults["augment_tree"] = copy.deepcopy(doc["augment_tree"])
        doc = {k: v for k, v in doc.items() if k != "augment_tree"}
    cfg = _merge(defaults, doc, "config")
    env = os.environ if env is None else env
    if ENV_SEED in env:
        try:
            cfg["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}") from None
    validate_run_config(cfg)
    return cfg


def _task_weights(d: dict) -> dict[TaskKind, float]:
    return {TaskKind.from_name(name): float(w) for name, w in d.items()}


def to_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    sampler = SamplerConfig(
        task_weights=_task_weights(cfg["sampler"]["task_weights"]),
        context_size_max=int(cfg["sampler"]["context_size_max"]),
        mixing_probs=tuple(cfg["sampler"]["mixing_probs"]),
        holdout=Holdout.from_dict(cfg["sampler"]["holdout"]),
        seg_subset_sizes=tuple(cfg["sampler"]["seg_subset_sizes"]),
        sr_factors=tuple(cfg["sampler"]["sr_factors"]),
        severity_range=tuple(cfg["sampler"]["severity_range"]),
        bias_prob=float(cfg["sampler"]["bias_prob"]),
    )
    tree = AugTree.from_dict(cfg["augment_tree"]) if cfg["augment_tree"] else None
    try:
        return TrainConfig(
            steps_max=int(t["steps_max"]),
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            val_interval=int(t["val_interval"]),
            patience_epochs=int(t["patience_epochs"]),
            seed=int(cfg["seed"]),
            sigma2=float(t["sigma2"]),
            grad_clip=float(t["grad_clip"]),
            pool_size=int(t["pool_size"]),
            val_fraction=float(t["val_fraction"]),
            val_episodes=int(t["val_episodes"]),
            workers=int(t["workers"]),
            model=ModelConfig(**cfg["model"]),
            baseline=BaselineConfig(**t["baseline"]),
            sampler=sampler,
            phantom=PhantomConfig(**t["phantom"]),
            augment_tree=tree,
            baseline_seg_classes=tuple(t["baseline_seg_classes"]),
            baseline_target_modality=int(t["baseline_target_modality"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


@dataclass
class EvalSettings:
    tasks: list[TaskKind]
    sizes: list[int]
    episodes_per_cell: int
    bootstrap: int
    dump_pgm: bool
    pool_size: int
    pool_seed: int


def to_eval_settings(cfg: dict) -> EvalSettings:
    e = cfg["eval"]
    return EvalSettings(
        tasks=[TaskKind.from_name(t) for t in e["tasks"]],
        sizes=[int(s) for s in e["sizes"]],
        episodes_per_cell=int(e["episodes_per_cell"]),
        bootstrap=int(e["bootstrap"]),
        dump_pgm=bool(e["dump_pgm"]),
        pool_size=int(e["pool_size"]),
        pool_seed=int(e["pool_seed"]),
    )


def validate_run_config(cfg: dict) -> None:
    """Instantiate every section so malformed values fail before any compute."""
    try:
        to_train_config(cfg)
        to_eval_settings(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def parse_holdout(spec: str) -> Holdout:
    """Parse 'task:<kind>', 'modality:<id>', 'class:<id>' (comma separable)."""
    tasks, modalities, classes = set(), set(), set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"bad holdout item {part!r}; use kind:value")
        key, value = part.split(":", 1)
        if key == "task":
            tasks.add(TaskKind.from_name(value).value)
        elif key == "modality":
            modalities.add(int(value))
        elif key == "class":
            classes.add(int(value))
        else:
            raise ConfigError(f"unknown holdout kind {key!r} (task/modality/class)")
    try:
        return Holdout(tasks=frozenset(tasks), modalities=frozenset(modalities),
                       classes=frozenset(classes))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def merge_holdout(cfg: dict, holdout: Holdout) -> dict:
    out = copy.deepcopy(cfg)
    base = Holdout.from_dict(cfg["sampler"]["holdout"])
    merged = Holdout(tasks=base.tasks | holdout.tasks,
                     modalities=base.modalities | holdout.modalities,
                     classes=base.classes | holdout.classes)
    out["sampler"]["holdout"] = merged.to_dict()
    return out


def write_materialized(cfg: dict, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.json"
    out.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return out
