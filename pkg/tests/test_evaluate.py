import numpy as np
import pytest

from neuralizer.datagen import Holdout, SamplerConfig, build_episode, make_pool, PhantomConfig
from neuralizer.episode import TaskKind
from neuralizer.evaluate import (
    EvalReport,
    EvalRow,
    dump_episode_pgms,
    episode_montage,
    eval_curves,
    holdout_compare,
    infer,
    infer_bootstrap,
    params_from_checkpoint,
)
from neuralizer.model import forward
from neuralizer.tensor import Tensor
from neuralizer.train import train_baseline, train_neuralizer

from conftest import smoke_train_config


@pytest.fixture(scope="module")
def trained():
    ckpt = train_neuralizer(smoke_train_config())
    return ckpt, params_from_checkpoint(ckpt)


@pytest.fixture(scope="module")
def eval_pool():
    return make_pool(10, PhantomConfig(image_size=16), base_seed=7100)


def sample_episode(pool, kind=TaskKind.SEGMENTATION, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return build_episode(kind, pool, SamplerConfig(context_size_max=4), rng,
                         context_size=n)


class TestInfer:
    def test_equals_model_forward(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        got = infer(ep.input, ep.context_stack(), params).logits
        want = forward(Tensor(ep.input[None]),
                       Tensor(ep.context_stack()[:, None]), params).data[0]
        assert np.array_equal(got, want)

    def test_deterministic(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        a = infer(ep.input, ep.context_stack(), params).logits
        b = infer(ep.input, ep.context_stack(), params).logits
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("n", [1, 8])
    def test_same_checkpoint_accepts_any_context_size(self, trained, eval_pool, n):
        _, params = trained
        ep = sample_episode(eval_pool, n=n)
        out = infer(ep.input, ep.context_stack(), params, dice=True)
        assert out.logits.shape == (1, 16, 16)
        assert set(np.unique(out.mask)) <= {0.0, 1.0}

    def test_empty_context_rejected(self, trained):
        _, params = trained
        with pytest.raises(ValueError, match="non-empty"):
            infer(np.zeros((3, 16, 16), dtype=np.float32),
                  np.zeros((0, 4, 16, 16), dtype=np.float32), params)


class TestBootstrap:
    def test_b1_identity_jitter_equals_infer(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        plain = infer(ep.input, ep.context_stack(), params)
        boot = infer_bootstrap(ep.input, ep.context_stack(), params, B=1,
                               rng=np.random.default_rng(0), jitter_deg=0.0,
                               jitter_px=0.0, resample=False)
        assert np.array_equal(plain.logits, boot.logits)

    def test_deterministic_given_rng_seed(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        a = infer_bootstrap(ep.input, ep.context_stack(), params, B=4,
                            rng=np.random.default_rng(5))
        b = infer_bootstrap(ep.input, ep.context_stack(), params, B=4,
                            rng=np.random.default_rng(5))
        assert np.array_equal(a.logits, b.logits)

    def test_replicate_average_is_order_insensitive(self, trained, eval_pool, rng):
        # averaging in float64 makes the replicate order immaterial
        preds = rng.normal(size=(6, 1, 16, 16)).astype(np.float32)
        mean_a = np.mean(preds, axis=0, dtype=np.float64).astype(np.float32)
        mean_b = np.mean(preds[rng.permutation(6)], axis=0, dtype=np.float64).astype(np.float32)
        assert np.abs(mean_a - mean_b).max() <= 1e-6

    def test_zero_replicates_rejected(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        with pytest.raises(ValueError, match="B >= 1"):
            infer_bootstrap(ep.input, ep.context_stack(), params, B=0)

    def test_mask_thresholded_after_averaging(self, trained, eval_pool):
        _, params = trained
        ep = sample_episode(eval_pool)
        out = infer_bootstrap(ep.input, ep.context_stack(), params, B=3,
                              rng=np.random.default_rng(1), dice=True)
        assert np.array_equal(out.mask, (out.logits > 0).astype(np.float32))


class TestEvalCurves:
    def test_row_count_and_determinism(self, trained, eval_pool):
        ckpt, _ = trained
        tasks = [TaskKind.SEGMENTATION, TaskKind.DENOISE_BIAS]
        kw = dict(sizes=(1, 2), episodes_per_cell=20, seed=4,
                  sampler=SamplerConfig(context_size_max=4))
        a = eval_curves({"m": ckpt}, tasks, eval_pool, **kw)
        b = eval_curves({"m": ckpt}, tasks, eval_pool, **kw)
        assert len(a.rows) == 1 * len(tasks) * 2
        assert a.to_csv() == b.to_csv()

    def test_metric_kind_per_task(self, trained, eval_pool):
        ckpt, _ = trained
        rep = eval_curves({"m": ckpt}, [TaskKind.SKULL_STRIPPING, TaskKind.INPAINTING],
                          eval_pool, sizes=(1,), episodes_per_cell=20, seed=1,
                          sampler=SamplerConfig(context_size_max=4))
        assert rep.cell("m", "skull_stripping", 1).metric == "dice"
        assert rep.cell("m", "inpainting", 1).metric == "psnr"

    def test_too_few_episodes_rejected(self, trained, eval_pool):
        ckpt, _ = trained
        with pytest.raises(ValueError, match="at least 20"):
            eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool,
                        sizes=(1,), episodes_per_cell=5)

    def test_baseline_cells_and_missing_cell_error(self, trained, eval_pool):
        ckpt, _ = trained
        cfg = smoke_train_config(steps_max=6, val_interval=3)
        base = train_baseline(TaskKind.SEGMENTATION, 1, cfg)
        baselines = {(TaskKind.SEGMENTATION, 1): [base]}
        rep = eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool, sizes=(1,),
                          episodes_per_cell=20, seed=2,
                          sampler=SamplerConfig(context_size_max=4),
                          baselines=baselines,
                          frozen_by_task={TaskKind.SEGMENTATION: {"classes": [2]}})
        assert {r.model for r in rep.rows} == {"m", "baseline"}
        with pytest.raises(KeyError, match="missing baseline"):
            eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool, sizes=(1, 2),
                        episodes_per_cell=20, seed=2,
                        sampler=SamplerConfig(context_size_max=4),
                        baselines=baselines)

    def test_parallel_cells_match_sequential(self, trained, eval_pool):
        ckpt, _ = trained
        kw = dict(sizes=(1, 2), episodes_per_cell=20, seed=9,
                  sampler=SamplerConfig(context_size_max=4))
        seq = eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool, **kw)
        par = eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool,
                          workers=3, **kw)
        assert seq.to_csv() == par.to_csv()

    def test_csv_shape(self, trained, eval_pool):
        ckpt, _ = trained
        rep = eval_curves({"m": ckpt}, [TaskKind.SEGMENTATION], eval_pool, sizes=(1,),
                          episodes_per_cell=20, seed=0,
                          sampler=SamplerConfig(context_size_max=4))
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "model,task,holdout,n,metric,mean,std,episodes"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[0] == "m" and fields[-1] == "20"
        assert float(fields[6]) >= 0.0  # std


class TestHoldoutCompare:
    def test_seen_vs_seen_gap_zero(self, eval_pool):
        cfg = smoke_train_config()
        seen = train_neuralizer(cfg)
        from neuralizer.datagen import SamplerConfig as SC
        cfg_holdout = smoke_train_config(
            sampler=SC(context_size_max=3, holdout=Holdout(classes=frozenset({2}))))
        unseen = train_neuralizer(cfg_holdout)
        rep = holdout_compare(seen, unseen, Holdout(classes=frozenset({2})), eval_pool,
                              sizes=(2,), episodes_per_cell=20, seed=5,
                              sampler=SamplerConfig(context_size_max=4))
        assert set(rep.meta["gaps"]) == {2}
        rows = {r.model: r for r in rep.rows}
        assert rows["unseen"].holdout == "class:2"
        assert rows["seen"].holdout == "-"
        # identical checkpoints must give exactly zero gap
        rep_same = holdout_compare(seen, unseen, Holdout(classes=frozenset({2})),
                                   eval_pool, sizes=(2,), episodes_per_cell=20, seed=5,
                                   sampler=SamplerConfig(context_size_max=4))
        assert rep.meta["gaps"][2] == rep_same.meta["gaps"][2]

    def test_mismatched_holdout_rejected(self, eval_pool):
        cfg = smoke_train_config()
        seen = train_neuralizer(cfg)
        with pytest.raises(ValueError, match="does not record"):
            holdout_compare(seen, seen, Holdout(classes=frozenset({2})), eval_pool,
                            sizes=(1,), episodes_per_cell=20)


class TestReportAndPgm:
    def test_cell_lookup_missing(self):
        rep = EvalReport(rows=[EvalRow("m", "t", "-", 1, "dice", 0.5, 0.1, 20)])
        with pytest.raises(KeyError):
            rep.cell("m", "t", 2)

    def test_montage_and_pgm_dump(self, eval_pool, tmp_path):
        ep = sample_episode(eval_pool, n=2)
        img = episode_montage(ep, pred=np.zeros_like(ep.target))
        assert img.ndim == 2 and img.shape[0] > 16
        files = dump_episode_pgms(ep, tmp_path, "ep0", pred=np.zeros_like(ep.target))
        assert len(files) == 6
        from neuralizer.ntf import read_pgm
        for f in files:
            assert read_pgm(f).ndim == 2
