import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from udae import engine, metrics
from udae.engine import ShapeError
from udae.metrics import LossConfig, SsimParams

from oracles import central_difference, ssim_windows

unit = st.floats(0, 1, allow_nan=False)


def _untied(rng, shape, ref, margin=0.01):
    # keep |a - b| away from the L1 kink
    a = rng.random(shape)
    close = np.abs(a - ref) < margin
    return np.where(close, np.clip(ref + np.where(ref < 0.5, 2, -2) * margin, 0, 1), a)


class TestParams:
    def test_window_and_weights_normalized(self):
        p = SsimParams()
        assert p.window().sum() == pytest.approx(1.0, abs=1e-12)
        assert np.outer(p.window(), p.window()).sum() == pytest.approx(1.0, abs=1e-12)
        assert p.normalized_weights().sum() == pytest.approx(1.0, abs=1e-9)
        assert (p.window_size, p.sigma, p.k1, p.k2, p.data_range, p.scales) == (11, 1.5, 0.01, 0.03, 1.0, 5)

    def test_alpha_range(self):
        assert LossConfig().alpha == 0.80
        with pytest.raises(ValueError):
            LossConfig(1.5)


class TestPixelLosses:
    def test_mse_values(self, rng):
        x = rng.random((1, 3, 8, 8))
        assert metrics.mse(x, x) == 0.0
        assert metrics.mse(np.zeros((1, 3, 4, 4)), np.ones((1, 3, 4, 4))) == 1.0

    def test_mse_direct_sum(self, rng):
        a, b = rng.random((2, 3, 5, 7)), rng.random((2, 3, 5, 7))
        total = 0.0
        for u, v in zip(a.ravel(), b.ravel()):
            total += (float(u) - float(v)) ** 2
        assert metrics.mse(a, b) == pytest.approx(total / a.size, abs=1e-7)

    def test_l1_values(self, rng):
        x = rng.random((1, 3, 8, 8))
        assert metrics.l1_loss(x, x) == 0.0
        assert metrics.l1_loss(np.zeros((1, 3, 4, 4)), np.ones((1, 3, 4, 4))) == 1.0

    def test_l1_gradient(self, rng):
        b = rng.random((1, 2, 5, 5))
        a = _untied(rng, b.shape, b)
        _, g = metrics.l1_loss_with_grad(a, b)
        assert engine.relative_error(g, central_difference(lambda: metrics.l1_loss(a, b), a)) < 1e-4

    def test_l1_subgradient_zero_at_tie(self):
        _, g = metrics.l1_loss_with_grad(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))
        assert not g.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.mse(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


class TestSsim:
    def test_identity(self, rng):
        x = rng.random((2, 3, 20, 20))
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_image_penalized(self):
        yy, xx = np.mgrid[0:24, 0:24] / 23
        x = (0.3 + 0.4 * (xx + yy) / 2)[None, None]
        assert metrics.ssim(x, 1 - x) < 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_window_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        got = metrics.ssim(a[None, None], b[None, None])
        assert got == pytest.approx(ssim_windows(a, b), abs=1e-8)

    def test_colour_is_channel_mean(self, rng):
        a, b = rng.random((1, 3, 14, 14)), rng.random((1, 3, 14, 14))
        per = [metrics.ssim(a[:, c : c + 1], b[:, c : c + 1]) for c in range(3)]
        assert metrics.ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ShapeError, match="window"):
            metrics.ssim(np.zeros((1, 1, 10, 12)), np.zeros((1, 1, 10, 12)))

    @given(arrays(np.float64, (1, 2, 12, 13), elements=unit), arrays(np.float64, (1, 2, 12, 13), elements=unit))
    def test_symmetric_and_bounded(self, a, b):
        s = metrics.ssim(a, b)
        assert s == metrics.ssim(b, a)
        assert metrics.mse(a, b) == metrics.mse(b, a)
        assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9

    def test_gradient(self, rng):
        a, b = rng.random((1, 2, 14, 14)), rng.random((1, 2, 14, 14))
        _, g = metrics.ssim_with_grad(a, b)
        assert engine.relative_error(g, central_difference(lambda: metrics.ssim(a, b), a)) < 1e-4


class TestMsSsim:
    def test_identity(self, rng):
        x = rng.random((1, 3, 48, 48))
        assert metrics.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_scale_reduction_64(self, rng):
        x = rng.random((1, 3, 64, 64))
        res = metrics.ms_ssim_details(x, x * 0.9)
        assert res.scales == 3  # 11 * 2**2 = 44 <= 64 < 88
        w = np.array(metrics.MS_SSIM_WEIGHTS[:3])
        np.testing.assert_allclose(res.weights, w / w.sum())
        assert metrics.ms_ssim_details(x, x).value == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("size,scales", [(11, 1), (21, 1), (22, 2), (176, 5), (500, 5)])
    def test_usable_scales(self, size, scales):
        assert metrics.usable_scales(size, size) == scales

    def test_too_small(self):
        with pytest.raises(ShapeError):
            metrics.ms_ssim(np.zeros((1, 3, 10, 10)), np.zeros((1, 3, 10, 10)))

    def test_single_scale_is_ssim(self, rng):
        a, b = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
        # the 1e-6 floor applies per channel before averaging
        per = [max(metrics.ssim(a[:, c : c + 1], b[:, c : c + 1]), 1e-6) for c in range(3)]
        assert metrics.ms_ssim(a, b) == pytest.approx(np.mean(per), rel=1e-12)

    def test_gradient_48(self, rng):
        a, b = rng.random((1, 3, 48, 48)), rng.random((1, 3, 48, 48))
        res = metrics.ms_ssim_with_grad(a, b)

        def fn():
            r = metrics.ms_ssim_with_grad(a, b)
            return r.value, [r.grad]

        assert engine.gradient_check(fn, [a], max_entries=300) < 1e-3
        assert res.grad.shape == a.shape

    def test_gradient_odd_size(self, rng):
        # 45 px: the pyramid drops a trailing row/column at each level
        a, b = rng.random((1, 1, 45, 45)), rng.random((1, 1, 45, 45))

        def fn():
            r = metrics.ms_ssim_with_grad(a, b)
            return r.value, [r.grad]

        assert engine.gradient_check(fn, [a], max_entries=200) < 1e-3


class TestCompositeLoss:
    def test_identity(self, rng):
        x = rng.random((1, 3, 48, 48))
        loss, g = metrics.composite_loss(x, x)
        assert loss == pytest.approx(0.0, abs=1e-6)
        assert g.shape == x.shape

    def test_alpha_zero_is_l1(self, rng):
        a, b = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
        assert metrics.composite_loss(a, b, LossConfig(0.0))[0] == metrics.l1_loss(a, b)

    def test_zeros_vs_ones(self):
        a, b = np.zeros((1, 3, 48, 48)), np.ones((1, 3, 48, 48))
        expected = 0.8 * (1 - metrics.ms_ssim(a, b)) + 0.2 * 1.0
        assert metrics.composite_loss(a, b, LossConfig(0.8))[0] == pytest.approx(expected, abs=1e-12)
        assert metrics.ms_ssim_l1(a, b) == pytest.approx(expected, abs=1e-12)

    def test_gradient(self, rng):
        b = rng.random((1, 3, 24, 24))
        a = _untied(rng, b.shape, b)

        def fn():
            loss, g = metrics.composite_loss(a, b)
            return loss, [g], np.packbits(a > b).tobytes()

        assert engine.gradient_check(fn, [a], max_entries=400) < 1e-3

    def test_grad_dtype_follows_output(self, rng):
        a = rng.random((1, 3, 16, 16)).astype(np.float32)
        _, g = metrics.composite_loss(a, rng.random((1, 3, 16, 16)).astype(np.float32))
        assert g.dtype == np.float32

    @given(arrays(np.float64, (1, 3, 22, 22), elements=unit), arrays(np.float64, (1, 3, 22, 22), elements=unit))
    def test_nonnegative(self, a, b):
        ms = metrics.ms_ssim(a, b)
        loss, _ = metrics.composite_loss(a, b)
        if ms >= 0:
            assert loss >= -1e-12
