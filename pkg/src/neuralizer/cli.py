"""Command-line entry point: train, eval, infer, preview, params.

Exit codes: 0 success, 2 usage or config problems, 3 training divergence.
All inputs are validated before heavy compute starts; every training run
directory receives the exact materialized config for provenance.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    load_run_config,
    merge_holdout,
    parse_holdout,
    to_eval_settings,
    to_train_config,
    write_materialized,
)
from .datagen import make_pool
from .episode import TaskKind, loss_kind_for
from .evaluate import (
    dump_episode_pgms,
    eval_curves,
    infer,
    infer_bootstrap,
    params_from_checkpoint,
)
from .model import (
    BaselineConfig,
    ModelConfig,
    count_baseline_params_flops,
    count_params_flops,
)
from .ntf import FormatError, read_ntf, write_ntf, write_pgm
from .train import (
    TrainingDiverged,
    baseline_replicates,
    train_baseline,
    train_neuralizer,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _write_history_csv(history: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,train_loss,val_loss\n")
        for row in history:
            f.write(f"{row['step']},{row['train_loss']:.6f},{row['val_loss']:.6f}\n")


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.holdout:
            cfg = merge_holdout(cfg, parse_holdout(args.holdout))
        if args.steps is not None:
            cfg["train"]["steps_max"] = args.steps
        if args.workers is not None:
            cfg["train"]["workers"] = args.workers
        run_dir = Path(args.run_dir or cfg["paths"]["run_dir"])
        train_cfg = to_train_config(cfg)
    except ConfigError as e:
        return _fail(str(e))

    write_materialized(cfg, run_dir)

    def progress(step, train_loss, val_loss):
        print(f"step {step:6d}  train {train_loss:10.4f}  val {val_loss:10.4f}", flush=True)

    try:
        if args.baseline:
            task = TaskKind.from_name(args.baseline[0])
            n_subjects = int(args.baseline[1])
            for rep in range(baseline_replicates(n_subjects)):
                ckpt = train_baseline(task, n_subjects, train_cfg, replicate=rep,
                                      progress=progress)
                out = run_dir / f"baseline_{task.value}_n{n_subjects}_r{rep}.nlz1"
                save_checkpoint(ckpt, out)
                _write_history_csv(ckpt.history, run_dir / f"history_{out.stem}.csv")
                print(f"wrote {out} (best val {ckpt.best_val:.4f} at step {ckpt.step})")
        else:
            ckpt = train_neuralizer(train_cfg, progress=progress)
            out = run_dir / "model.nlz1"
            save_checkpoint(ckpt, out)
            _write_history_csv(ckpt.history, run_dir / "history.csv")
            print(f"wrote {out} (best val {ckpt.best_val:.4f} at step {ckpt.step})")
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError) as e:
        return _fail(str(e))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_run_config(args.config)
        settings = to_eval_settings(cfg)
        train_cfg = to_train_config(cfg)
        models = {}
        for item in args.ckpt:
            if "=" in item:
                mid, path = item.split("=", 1)
            else:
                mid, path = Path(item).stem, item
            ckpt = load_checkpoint(path)
            if ckpt.model_kind != "neuralizer":
                raise ConfigError(f"{path}: eval expects context-conditioned checkpoints")
            if ckpt.model_config.get("image_size") != cfg["model"]["image_size"]:
                raise ConfigError(
                    f"{path}: checkpoint image_size {ckpt.model_config.get('image_size')} "
                    f"disagrees with eval image_size {cfg['model']['image_size']}")
            models[mid] = ckpt
        if not models:
            raise ConfigError("eval needs at least one --ckpt")
    except (ConfigError, FormatError, FileNotFoundError) as e:
        return _fail(str(e))

    out_dir = Path(args.out or cfg["paths"]["run_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = make_pool(settings.pool_size, train_cfg.phantom, settings.pool_seed)
    report = eval_curves(models, settings.tasks, pool, sizes=settings.sizes,
                         episodes_per_cell=settings.episodes_per_cell,
                         seed=int(cfg["seed"]), sampler=train_cfg.sampler,
                         bootstrap=settings.bootstrap, workers=args.workers or 1)
    report_path = out_dir / "report.csv"
    report.write_csv(report_path)
    print(f"wrote {report_path} ({len(report.rows)} rows)")
    if settings.dump_pgm:
        from .datagen import build_episode
        from .episode import loss_kind_for as _lk
        first_id, first_ckpt = next(iter(models.items()))
        params = params_from_checkpoint(first_ckpt)
        n = settings.sizes[0]
        for task in settings.tasks:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(cfg["seed"]), 1, n, 0]))
            ep = build_episode(task, pool, train_cfg.sampler, rng, context_size=n)
            pred = infer(ep.input, ep.context_stack(), params,
                         dice=_lk(task) == "dice")
            dump_episode_pgms(ep, out_dir / "pgm", f"{task.value}_{first_id}",
                              pred=pred.logits)
    return EXIT_OK


def _read_image_ntf(path: str, channels: int) -> np.ndarray:
    arr = read_ntf(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] > channels:
        raise ConfigError(f"{path}: expected up to {channels} channels, got shape {arr.shape}")
    if arr.shape[0] < channels:
        padded = np.zeros((channels,) + arr.shape[1:], dtype=np.float32)
        padded[:arr.shape[0]] = arr
        arr = padded
    return arr.astype(np.float32)


def cmd_infer(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        if ckpt.model_kind != "neuralizer":
            raise ConfigError("infer expects a context-conditioned checkpoint")
        params = params_from_checkpoint(ckpt)
        x = _read_image_ntf(args.input, 3)
        if len(args.context) == 0:
            raise ConfigError("context set must not be empty")
        if len(args.context) % 2 != 0:
            raise ConfigError("context files must come in input/output pairs")
        pairs = []
        for i in range(0, len(args.context), 2):
            ci = _read_image_ntf(args.context[i], 3)
            ct = _read_image_ntf(args.context[i + 1], 1)
            pairs.append(np.concatenate([ci, ct], axis=0))
        ctx = np.stack(pairs)
        dice = args.task is not None and loss_kind_for(TaskKind.from_name(args.task)) == "dice"
    except (ConfigError, FormatError, FileNotFoundError) as e:
        return _fail(str(e))

    if args.bootstrap > 0:
        rng = np.random.default_rng(args.seed)
        pred = infer_bootstrap(x, ctx, params, B=args.bootstrap, rng=rng, dice=dice,
                               jitter_deg=args.jitter_deg, jitter_px=args.jitter_px,
                               resample=not args.no_resample)
    else:
        pred = infer(x, ctx, params, dice=dice)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ntf(out, pred.logits)
    write_pgm(out.with_suffix(".pgm"), np.clip(pred.logits[0], 0.0, 1.0))
    if pred.mask is not None:
        write_ntf(out.with_name(out.stem + "_mask.ntf"), pred.mask)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_preview(args) -> int:
    try:
        cfg = load_run_config(args.config)
        train_cfg = to_train_config(cfg)
        task = TaskKind.from_name(args.task)
    except (ConfigError, ValueError) as e:
        return _fail(str(e))

    from .augment import AugTree, apply_tree
    from .datagen import build_episode

    out_dir = Path(args.out or cfg["paths"]["run_dir"]) / "preview"
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    pool = make_pool(max(12, train_cfg.sampler.context_size_max + 2),
                     train_cfg.phantom, seed * 131 + 5)
    rng = np.random.default_rng(seed)
    try:
        ep = build_episode(task, pool, train_cfg.sampler, rng)
    except ValueError as e:
        return _fail(str(e))
    files = dump_episode_pgms(ep, out_dir, f"{task.value}_s{seed}")
    if cfg["augment_tree"]:
        aug = apply_tree(ep, AugTree.from_dict(cfg["augment_tree"]), seed)
        files += dump_episode_pgms(aug, out_dir, f"{task.value}_s{seed}_augmented")
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def params_table(cfg: dict, n_ctx: int) -> list[dict]:
    """Parameter and FLOP rows for the configured model and baseline."""
    model_cfg = ModelConfig(**cfg["model"])
    base_cfg = BaselineConfig(**cfg["train"]["baseline"])
    n_params, flops_1 = count_params_flops(model_cfg, 1)
    _, flops_n = count_params_flops(model_cfg, n_ctx)
    b_params, b_flops = count_baseline_params_flops(base_cfg)
    return [
        {"model": f"neuralizer(c={model_cfg.channels}, {model_cfg.image_size}px)",
         "params": n_params, "flops_n1": flops_1, "flops_nctx": flops_n, "n_ctx": n_ctx},
        {"model": f"baseline(w={base_cfg.width}, {base_cfg.image_size}px)",
         "params": b_params, "flops_n1": b_flops, "flops_nctx": b_flops, "n_ctx": n_ctx},
    ]


def cmd_params(args) -> int:
    try:
        cfg = load_run_config(args.config)
        rows = params_table(cfg, args.context_size)
    except ConfigError as e:
        return _fail(str(e))
    print(f"{'model':44s} {'params':>12s} {'flops[N=1]':>14s} {'flops[N=%d]' % args.context_size:>14s}")
    for r in rows:
        print(f"{r['model']:44s} {r['params']:12d} {r['flops_n1']:14.4g} {r['flops_nctx']:14.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuralizer",
                                description="Context-conditioned multi-task image model")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the model or a task-specific baseline")
    t.add_argument("config")
    t.add_argument("--baseline", nargs=2, metavar=("TASK", "N"),
                   help="train a task-specific baseline on N subjects")
    t.add_argument("--holdout", help="exclude task:<kind>, modality:<id>, or class:<id>")
    t.add_argument("--run-dir", help="override paths.run_dir")
    t.add_argument("--steps", type=int, help="override train.steps_max")
    t.add_argument("--workers", type=int, help="episode-building workers")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metric-vs-context-size report")
    e.add_argument("config")
    e.add_argument("--ckpt", action="append", default=[], metavar="[ID=]PATH")
    e.add_argument("--out", help="report directory")
    e.add_argument("--workers", type=int, help="parallel evaluation cells")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="run inference on NTF1 images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--context", nargs="+", default=[],
                   metavar="FILE", help="alternating input/output NTF1 files")
    i.add_argument("--out", required=True)
    i.add_argument("--task", help="task kind (enables mask output for dice tasks)")
    i.add_argument("--bootstrap", type=int, default=0)
    i.add_argument("--jitter-deg", type=float, default=2.0)
    i.add_argument("--jitter-px", type=float, default=2.0)
    i.add_argument("--no-resample", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("preview", help="write episode montage PGMs")
    v.add_argument("config")
    v.add_argument("--task", required=True)
    v.add_argument("--seed", type=int)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_preview)

    q = sub.add_parser("params", help="parameter count and FLOP estimates")
    q.add_argument("config")
    q.add_argument("--context-size", type=int, default=1)
    q.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
