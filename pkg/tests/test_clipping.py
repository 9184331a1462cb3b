import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplens.clipping import (
    ClippingRule,
    clip_factor,
    clip_factors,
    clipping_bias_diagnostic,
    privatize_gradient,
    privatize_gradient_many,
)

AUTO = ClippingRule.auto()
REPARAM1 = ClippingRule.reparam(1.0)


class TestClipFactor:
    def test_reparam_above_threshold(self):
        assert clip_factor(2.0, REPARAM1) == 0.5

    def test_reparam_below_threshold(self):
        assert clip_factor(0.5, REPARAM1) == 1.0

    def test_auto(self):
        assert clip_factor(4.0, AUTO) == 0.25

    def test_negative_norm_rejected(self):
        with pytest.raises(ValueError):
            clip_factor(-1.0, AUTO)

    def test_auto_zero_norm_sentinel(self):
        assert clip_factor(0.0, AUTO) == 0.0

    def test_vectorised_matches_scalar(self):
        norms = np.array([0.0, 0.3, 1.0, 2.5, 10.0])
        for rule in (AUTO, REPARAM1, ClippingRule.reparam(3.0)):
            expected = [clip_factor(n, rule) for n in norms]
            assert np.allclose(clip_factors(norms, rule), expected)

    @given(
        st.floats(min_value=1e-6, max_value=1e6),
        st.floats(min_value=1.0, max_value=1e3),
    )
    @settings(max_examples=200, deadline=None)
    def test_sensitivity_bound(self, g_norm, r):
        # clipped contribution never exceeds unit norm; AUTO attains it
        assert g_norm * clip_factor(g_norm, ClippingRule.reparam(r)) <= 1.0 + 1e-12
        assert g_norm * clip_factor(g_norm, AUTO) == pytest.approx(1.0)

    @given(
        st.floats(min_value=1e-9, max_value=1e6),
        st.floats(min_value=1.0, max_value=1e3),
    )
    @settings(max_examples=200, deadline=None)
    def test_auto_dominates_reparam(self, g_norm, r):
        # the zero-gradient sentinel is excluded: both rules contribute the
        # zero vector there, so no factor comparison is meaningful
        assert clip_factor(g_norm, AUTO) >= clip_factor(g_norm, ClippingRule.reparam(r)) - 1e-15


class TestPrivatizeGradient:
    def test_two_unit_gradients(self):
        grads = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = privatize_gradient(grads, AUTO, 0.0)
        assert np.allclose(out, [0.5, 0.5])

    def test_single_gradient_auto(self):
        # |g| = 5, C = 1/5, batch size 1: (3,4)/5
        out = privatize_gradient(np.array([[3.0, 4.0]]), AUTO, 0.0)
        assert np.allclose(out, [0.6, 0.8])

    def test_inactive_reparam_is_plain_mean(self):
        rng = np.random.default_rng(0)
        grads = 0.2 * rng.standard_normal((16, 5))
        assert np.max(np.linalg.norm(grads, axis=1)) < 1.0
        out = privatize_gradient(grads, REPARAM1, 0.0)
        assert np.allclose(out, grads.mean(axis=0), rtol=1e-12)

    def test_sigma_zero_deterministic(self):
        grads = np.array([[1.0, 2.0], [3.0, -1.0]])
        a = privatize_gradient(grads, AUTO, 0.0)
        b = privatize_gradient(grads, AUTO, 0.0)
        assert np.array_equal(a, b)

    def test_fixed_seed_bit_identical(self):
        grads = np.array([[1.0, 2.0], [3.0, -1.0]])
        a = privatize_gradient(grads, AUTO, 0.7, np.random.default_rng(42))
        b = privatize_gradient(grads, AUTO, 0.7, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_noise_mean_and_variance(self):
        grads = np.array([[0.6, 0.0], [0.0, 0.6]])
        b, sigma, draws = 2, 0.9, 20_000
        rng = np.random.default_rng(1)
        stacked = np.repeat(grads[None, :, :], draws, axis=0)
        outs = privatize_gradient_many(stacked, REPARAM1, sigma, rng)
        center = grads.mean(axis=0)
        noise = outs - center
        se = sigma / b / np.sqrt(draws)
        assert np.all(np.abs(noise.mean(axis=0)) <= 3 * se)
        var = noise.var(axis=0, ddof=1)
        assert np.all(np.abs(var - (sigma / b) ** 2) <= 0.05 * (sigma / b) ** 2)

    def test_zero_gradient_sample_contributes_nothing(self):
        grads = np.array([[0.0, 0.0], [0.0, 2.0]])
        out = privatize_gradient(grads, AUTO, 0.0)
        assert np.allclose(out, [0.0, 0.5])

    def test_errors(self):
        with pytest.raises(ValueError):
            privatize_gradient(np.empty((0, 3)), AUTO, 0.0)
        with pytest.raises(ValueError):
            privatize_gradient(np.ones((2, 2)), AUTO, -0.1)
        with pytest.raises(ValueError):
            privatize_gradient(np.ones((2, 2)), AUTO, 1.0, None)

    def test_many_matches_single(self):
        rng = np.random.default_rng(3)
        grads = rng.standard_normal((4, 3, 2))
        outs = privatize_gradient_many(grads, AUTO, 0.0)
        for i in range(4):
            assert np.allclose(outs[i], privatize_gradient(grads[i], AUTO, 0.0))


class TestDiagnostic:
    def test_parallel_gradients(self):
        grads = np.tile(np.array([1.0, 2.0]), (5, 1))
        diag = clipping_bias_diagnostic(grads, AUTO)
        assert diag.cosine == pytest.approx(1.0)

    def test_unit_norm_pair(self):
        grads = np.array([[1.0, 0.0], [0.0, 1.0]])
        diag = clipping_bias_diagnostic(grads, AUTO)
        assert diag.c_hat == pytest.approx(1.0)
        assert diag.cosine == pytest.approx(1.0)

    def test_skewed_pair_hand_oracle(self):
        grads = np.array([[10.0, 0.0], [0.0, 1.0]])
        diag = clipping_bias_diagnostic(grads, AUTO)
        # clipped sum (1,1) vs raw (10,1): cos = 11 / (sqrt(2) sqrt(101))
        expected = 11.0 / (np.sqrt(2.0) * np.sqrt(101.0))
        assert diag.cosine == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.7740, abs=5e-5)
        assert diag.c_hat == pytest.approx(0.55)

    def test_zero_sum_rejected(self):
        grads = np.array([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(ValueError):
            clipping_bias_diagnostic(grads, REPARAM1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            clipping_bias_diagnostic(np.empty((0, 2)), AUTO)
