import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from lupi.layers import (
    AffineLayer,
    HeteroDropoutConfig,
    cross_entropy,
    gaussian_dropout_sigma,
    hetero_dropout,
    ib_penalty,
    kl_mc_check,
    variance_head_forward,
)
from lupi.tensor import RngState, ShapeError, Tensor, backward, gradcheck, tsum


class TestAffine:
    def test_init_bounds_and_zero_bias(self, rng):
        layer = AffineLayer.init(50, 7, rng)
        assert layer.W.shape == (7, 50)
        assert np.all(np.abs(layer.W.data) <= math.sqrt(6 / 50))
        np.testing.assert_array_equal(layer.b.data, 0.0)

    def test_forward_matches_numpy(self, rng):
        layer = AffineLayer.init(4, 3, rng)
        layer.b.data[:] = [1.0, -1.0, 0.5]
        x = rng.normal((5, 4))
        np.testing.assert_allclose(layer(x).data, x @ layer.W.data.T + layer.b.data)


class TestVarianceHead:
    def test_output_positive_and_capped(self, rng):
        head = [AffineLayer.init(6, 8, rng.child(0)), AffineLayer.init(8, 5, rng.child(1))]
        head[1].b.data[:] = [-30.0, 0.0, 3.0, 10.0, 50.0]
        s = variance_head_forward(rng.normal((4, 6)) * 0.01, head, HeteroDropoutConfig(sigma_sq_max=4.0)).data
        assert np.all(s > 0)
        assert np.all(s <= 4.0)
        np.testing.assert_array_equal(s[:, 3:], 4.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_index(self, rng):
        head = [AffineLayer.init(3, 2, rng)]
        x = np.array([[0.0, np.nan, 0.0]])
        with pytest.raises(FloatingPointError, match="index"):
            variance_head_forward(x, head, HeteroDropoutConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HeteroDropoutConfig(sigma_sq_max=0.0)
        with pytest.raises(ValueError):
            HeteroDropoutConfig(mc_samples=0)


class TestHeteroDropout:
    def test_eval_is_identity_and_draws_nothing(self, rng):
        h = Tensor(np.array([[1.0, -2.0]]))
        out = hetero_dropout(h, np.ones((1, 2)), rng, mode="eval")
        assert out is h
        assert rng.draws == 0

    def test_zero_variance_is_identity(self, backend):
        h = np.random.default_rng(0).normal(size=(3, 4))
        out = hetero_dropout(h, np.zeros((3, 4)), RngState(0))
        np.testing.assert_array_equal(out.data, h)

    def test_unit_sigma_example(self, backend):
        """eps = 1, Sigma = 1 doubles the activation."""
        out = hetero_dropout(np.array([[1.5]]), np.array([[1.0]]), eps=np.array([[1.0]]))
        assert out.data[0, 0] == 3.0

    def test_gradients_with_frozen_noise(self, backend):
        r = np.random.default_rng(1)
        h = r.normal(size=(3, 4))
        s = r.uniform(0.2, 3.0, size=(3, 4))
        eps = r.normal(size=(3, 4))
        w = r.normal(size=(3, 4))
        assert gradcheck(lambda t: tsum(hetero_dropout(t, s, eps=eps) * w), h) < 1e-8
        assert gradcheck(lambda t: tsum(hetero_dropout(h, t, eps=eps) * w), s) < 1e-6

    def test_shape_and_sign_errors(self, rng):
        with pytest.raises(ShapeError):
            hetero_dropout(np.ones((2, 3)), np.ones((3, 2)), rng)
        with pytest.raises(ValueError, match="negative"):
            hetero_dropout(np.ones(2), np.array([1.0, -0.1]), rng)
        with pytest.raises(ValueError, match="rng"):
            hetero_dropout(np.ones(2), np.ones(2))

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.05, 4.0), st.integers(0, 2**31))
    def test_multiplier_moments(self, sigma, seed):
        """Multiplier has mean 1 and variance Sigma within 4 standard errors."""
        S = 20_000
        m = hetero_dropout(np.ones(S), np.full(S, sigma), RngState(seed)).data
        assert abs(m.mean() - 1.0) < 4 * math.sqrt(sigma / S)
        se_var = sigma * math.sqrt(2.0 / (S - 1))
        assert abs(m.var(ddof=1) - sigma) < 4 * se_var


class TestPenalty:
    def test_worked_value(self):
        """|log e| and |log 1/e| average to 1."""
        p = ib_penalty(np.array([[math.e, 1.0 / math.e]]), 1.0).item()
        assert p == pytest.approx(1.0, abs=1e-15)

    def test_zero_at_unit_variance(self):
        assert ib_penalty(np.ones((4, 3)), 2.5).item() == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 4.0), min_size=2, max_size=6), st.floats(0.0, 10.0))
    def test_nonnegative_and_linear_in_beta(self, sig, beta):
        s = np.array([sig])
        p1 = ib_penalty(s, 1.0).item()
        assert p1 >= 0.0
        assert ib_penalty(s, beta).item() == pytest.approx(beta * p1, rel=1e-12, abs=1e-15)
        if np.any(np.abs(np.log(s)) > 1e-9):
            assert p1 > 0.0

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            ib_penalty(np.array([[1.0, 0.0]]), 1.0)

    def test_gradient(self):
        s = np.array([[0.3, 2.0, 1.7], [0.9, 3.1, 0.5]])
        assert gradcheck(lambda t: ib_penalty(t, 0.7), s) < 1e-7


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros((3, 10)), [0, 5, 9]).item() == pytest.approx(math.log(10))

    def test_matches_direct_formula(self):
        z = np.random.default_rng(4).normal(size=(6, 4))
        y = np.array([0, 1, 2, 3, 0, 1])
        ref = -np.mean(z[np.arange(6), y] - np.log(np.exp(z).sum(axis=1)))
        assert cross_entropy(z, y).item() == pytest.approx(ref, rel=1e-12)

    def test_label_range(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy(np.zeros((1, 3)), [3])


class TestKLCheck:
    def test_analytic_matches_scipy_entropy(self, rng):
        sigma = np.array([0.5, 1.0, 3.0])
        res = kl_mc_check(sigma, np.zeros(3), 20_000, rng)
        assert res.analytic == pytest.approx(float(np.sum(norm(0, np.sqrt(sigma)).entropy())), rel=1e-12)
        assert abs(res.analytic - res.monte_carlo) < 4 * res.stderr

    def test_needs_enough_samples(self, rng):
        with pytest.raises(ValueError):
            kl_mc_check(np.ones(2), np.zeros(2), 10, rng)


def test_gaussian_dropout_sigma():
    assert gaussian_dropout_sigma(0.5) == 1.0
    assert gaussian_dropout_sigma(0.2) == pytest.approx(2.0)
