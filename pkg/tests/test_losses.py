import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralizer import tensor as T
from neuralizer.losses import (
    LossConfig,
    dice_coefficient,
    psnr,
    soft_dice_loss,
    threshold_mask,
    weighted_mse_loss,
)

from oracles import (
    dice_coefficient_loops,
    psnr_loops,
    soft_dice_loss_loops,
    weighted_mse_loops,
)


def f64(a):
    return T.tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


class TestSoftDice:
    def test_saturated_perfect_prediction(self, rng):
        t = (rng.random((2, 1, 6, 6)) > 0.6).astype(np.float32)
        logits = np.where(t == 1, 20.0, -20.0).astype(np.float32)
        loss = soft_dice_loss(T.tensor(logits), T.tensor(t)).item()
        assert loss < 1e-6

    def test_empty_mask_stable(self):
        # sum(p) ~ 5e-8 << eps, so eps keeps the ratio near 1 and the loss small
        t = np.zeros((1, 1, 5, 5), dtype=np.float32)
        loss = soft_dice_loss(T.tensor(np.full_like(t, -20.0)), T.tensor(t)).item()
        assert 0.0 <= loss < 0.05
        assert np.isfinite(loss)

    def test_matches_loop_oracle(self, rng):
        logits = rng.normal(size=(3, 1, 4, 4))
        t = (rng.random((3, 1, 4, 4)) > 0.5).astype(np.float64)
        got = soft_dice_loss(f64(logits), f64(t)).item()
        assert abs(got - soft_dice_loss_loops(logits, t)) < 1e-9

    def test_gradient_check(self, rng):
        logits = f64(rng.normal(size=(2, 1, 4, 4)))
        t = f64((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        err = T.grad_check(lambda x: soft_dice_loss(x, t), [logits])
        assert err < 1e-4

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            soft_dice_loss(T.zeros((1, 1, 2, 2)), T.tensor(np.full((1, 1, 2, 2), 0.5)))

    def test_range(self, rng):
        for seed in range(10):
            r = np.random.default_rng(seed)
            logits = T.tensor(r.normal(size=(2, 1, 5, 5)) * 5)
            t = T.tensor((r.random((2, 1, 5, 5)) > 0.5).astype(np.float32))
            assert 0.0 <= soft_dice_loss(logits, t).item() <= 1.0


class TestWeightedMse:
    def test_zero_at_equality(self, rng):
        x = rng.normal(size=(2, 1, 3, 3))
        assert weighted_mse_loss(f64(x), f64(x.copy())).item() == 0.0

    def test_single_pixel_factor_ten(self):
        # diff 0.1 at sigma2=0.05: 0.01 / 0.1 = 0.1, the per-pixel factor is 10
        loss = weighted_mse_loss(f64([[0.6]]), f64([[0.5]]), sigma2=0.05).item()
        assert abs(loss - 0.1) < 1e-12

    def test_matches_loop_oracle(self, rng):
        p = rng.normal(size=(2, 1, 4, 4))
        t = rng.normal(size=(2, 1, 4, 4))
        got = weighted_mse_loss(f64(p), f64(t), sigma2=0.05).item()
        assert abs(got - weighted_mse_loops(p, t, 0.05)) < 1e-9

    def test_gradient_check(self, rng):
        p = f64(rng.normal(size=(2, 1, 3, 3)))
        t = f64(rng.normal(size=(2, 1, 3, 3)))
        assert T.grad_check(lambda x: weighted_mse_loss(x, t), [p]) < 1e-4

    def test_nonnegative(self, rng):
        p, t = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
        assert weighted_mse_loss(f64(p), f64(t)).item() >= 0.0


class TestDiceCoefficient:
    def test_identical_nonempty(self, rng):
        m = (rng.random((8, 8)) > 0.5).astype(np.float32)
        m[0, 0] = 1.0
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.float32)
        b = np.zeros((4, 4), dtype=np.float32)
        a[0, 0] = b[3, 3] = 1.0
        assert dice_coefficient(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=np.float32)
        b = np.zeros((4, 4), dtype=np.float32)
        a[0, :4] = 1.0
        b[0, 2:] = b[1, 2:] = 1.0
        assert dice_coefficient(a, b) == 0.5  # |A|=4, |B|=4, inter=2

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), dtype=np.float32)
        assert dice_coefficient(z, z) == 1.0

    def test_symmetry(self, rng):
        a = (rng.random((6, 6)) > 0.5).astype(np.float32)
        b = (rng.random((6, 6)) > 0.5).astype(np.float32)
        assert dice_coefficient(a, b) == dice_coefficient(b, a)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            dice_coefficient(np.full((2, 2), 0.5, dtype=np.float32),
                             np.zeros((2, 2), dtype=np.float32))

    def test_threshold_matches_sigmoid_half(self, rng):
        logits = rng.normal(size=(1, 5, 5)).astype(np.float32)
        mask = threshold_mask(logits)
        sig = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        assert np.array_equal(mask, (sig > 0.5).astype(np.float32))


class TestPsnr:
    def test_exact_match_hits_cap(self, rng):
        x = rng.random((8, 8))
        assert psnr(x, x.copy()) == 99.0

    def test_uniform_error_twenty_db(self):
        t = np.full((10, 10), 0.5)
        assert abs(psnr(t + 0.1, t) - 20.0) < 1e-9

    def test_matches_loop_oracle(self, rng):
        p = rng.random((6, 6))
        t = rng.random((6, 6))
        assert abs(psnr(p, t) - psnr_loops(p, t)) < 1e-9

    def test_strictly_decreasing_in_mse(self):
        t = np.full((8, 8), 0.5)
        values = [psnr(t + d, t) for d in (0.01, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_clamps_before_compare(self):
        t = np.zeros((4, 4))
        assert psnr(np.full((4, 4), -5.0), t) == 99.0  # clamps to exactly zero


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig(kind="mse")
        assert cfg.sigma2 == 0.05 and cfg.dice_eps == 1e-6 and cfg.psnr_peak == 1.0

    @pytest.mark.parametrize("bad", [{"kind": "huber"}, {"kind": "mse", "sigma2": 0.0},
                                     {"kind": "dice", "dice_eps": -1.0}])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ValueError):
            LossConfig(**bad)


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_metric_oracle_agreement_randomized(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(1, 1, 3, 3))
    t = rng.normal(size=(1, 1, 3, 3))
    assert abs(weighted_mse_loss(f64(p), f64(t), 0.05).item()
               - weighted_mse_loops(p, t, 0.05)) < 1e-9
    assert abs(psnr(p[0, 0], t[0, 0]) - psnr_loops(p[0, 0], t[0, 0])) < 1e-9
    a = (rng.random((4, 4)) > 0.5).astype(np.float32)
    b = (rng.random((4, 4)) > 0.5).astype(np.float32)
    assert abs(dice_coefficient(a, b) - dice_coefficient_loops(a, b)) < 1e-12
