import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgp.kernels import (Family, HyperConfig, KernelSpec, LengthscaleFunction, covariance,
                          cov_diag, eq_cov, gibbs_cov, lengthscale_at, silverman_bandwidth,
                          weighted_sum_cov)


def eq(variance=1.0, ls=1.0):
    return KernelSpec(Family.EQ, variance, ls)


class ConstantLengthscale:
    def __init__(self, r):
        self.r = r

    def __call__(self, X):
        return np.full(np.asarray(X).shape[0], self.r)


class TestEQ:
    def test_same_point_gives_variance(self):
        assert eq_cov([[0.3]], [[0.3]], eq())[0, 0] == 1.0

    def test_one_lengthscale_apart(self):
        np.testing.assert_allclose(eq_cov([[0.0]], [[2.5]], eq(1.0, 2.5)), [[math.exp(-0.5)]])

    def test_row_example(self):
        K = eq_cov([[0.0]], [[0.0], [1.0]], eq(2.0, 1.0))
        np.testing.assert_allclose(K, [[2.0, 2.0 * math.exp(-0.5)]], rtol=1e-15)

    def test_ard_lengthscales(self):
        K = eq_cov([[0.0, 0.0]], [[1.0, 2.0]], eq(1.0, [1.0, 4.0]))
        np.testing.assert_allclose(K, [[math.exp(-0.5 * (1.0 + 0.25))]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            eq_cov(np.zeros((2, 3)), np.zeros((2, 3)), eq(1.0, [1.0, 2.0]))

    @pytest.mark.parametrize("variance,ls", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, [1.0, -2.0])])
    def test_nonpositive_hyperparameters(self, variance, ls):
        with pytest.raises(ValueError):
            eq(variance, ls)

    def test_cov_diag_matches(self, rng):
        X = rng.normal(size=(7, 2))
        np.testing.assert_array_equal(cov_diag(X, eq(3.0, 0.5)), np.diag(covariance(X, X, eq(3.0, 0.5))))


class TestGibbs:
    def test_constant_lengthscale_reduces_to_eq(self, rng):
        X1, X2 = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
        spec = KernelSpec(Family.GIBBS, 2.3, lengthscale_fn=ConstantLengthscale(0.7))
        np.testing.assert_allclose(gibbs_cov(X1, X2, spec), eq_cov(X1, X2, eq(2.3, 0.7)),
                                   rtol=0, atol=1e-12)

    def test_prefactor_with_two_lengthscales(self):
        # points 1e-9 apart straddling the switch: exponent is ~1 so K ~ prefactor
        def fn(X):
            return np.where(np.asarray(X)[:, 0] < 0.5, 1.0, 10.0)

        spec = KernelSpec(Family.GIBBS, 1.0, lengthscale_fn=fn)
        K = gibbs_cov([[0.5 - 1e-9]], [[0.5]], spec)
        np.testing.assert_allclose(K, [[math.sqrt(20 / 101)]], rtol=1e-9)
        assert K[0, 0] == pytest.approx(0.4450, abs=5e-5)

    def test_equal_lengthscales_same_point(self):
        spec = KernelSpec(Family.GIBBS, 4.2, lengthscale_fn=ConstantLengthscale(3.0))
        assert gibbs_cov([[1.0, 2.0]], [[1.0, 2.0]], spec)[0, 0] == pytest.approx(4.2, rel=1e-15)

    def test_nonpositive_lengthscale_rejected(self):
        spec = KernelSpec(Family.GIBBS, 1.0, lengthscale_fn=ConstantLengthscale(0.0))
        with pytest.raises(ValueError):
            gibbs_cov([[0.0]], [[1.0]], spec)

    def test_density_driven_kernel_is_psd(self, rng):
        X = np.concatenate([rng.normal(0, 1, 25), rng.normal(8, 0.3, 3)])[:, None]
        fn = LengthscaleFunction(n=5.0, m=20.0, training_inputs=X)
        spec = KernelSpec(Family.GIBBS, 1.0, lengthscale_fn=fn)
        K = gibbs_cov(X, X, spec)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        np.linalg.cholesky(K + 1e-8 * np.eye(len(X)))


class TestLengthscaleFunction:
    def test_zero_density_hits_bound(self):
        fn = LengthscaleFunction(n=5.0, m=100.0, training_inputs=np.zeros((3, 1)))
        assert fn.lengthscale_from_density(0.0) == 100.0

    def test_formula_value(self):
        fn = LengthscaleFunction(n=5.0, m=100.0, training_inputs=np.zeros((3, 1)))
        assert fn.lengthscale_from_density(0.1) == pytest.approx(1 / (0.01 + 0.02), rel=1e-14)
        assert fn.lengthscale_from_density(0.1) == pytest.approx(33.333333, rel=1e-6)

    def test_large_density_limit(self):
        fn = LengthscaleFunction(n=5.0, m=100.0, training_inputs=np.zeros((3, 1)))
        vals = fn.lengthscale_from_density(np.array([1e3, 1e6, 1e12]))
        assert np.all(vals > 0) and vals[-1] < 1e-10
        assert np.all(np.diff(vals) < 0)

    def test_density_is_unnormalised_count_kde(self):
        X = np.array([[0.0], [0.0]])
        fn = LengthscaleFunction(n=1.0, m=1.0, training_inputs=X, kde_bandwidth=0.5)
        expected = 2 / math.sqrt(2 * math.pi * 0.25)
        assert fn.density([[0.0]])[0] == pytest.approx(expected, rel=1e-14)

    def test_radius_zero_is_plain_density(self, rng):
        X = rng.normal(size=(20, 2))
        fn = LengthscaleFunction(n=3.0, m=9.0, training_inputs=X, neighbourhood_radius=0.0)
        q = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(fn.min_density(q), fn.density(q))

    def test_neighbourhood_min_never_exceeds_plain(self, rng):
        X = rng.normal(size=(30, 1))
        fn = LengthscaleFunction(n=3.0, m=9.0, training_inputs=X)
        q = np.linspace(-3, 3, 40)[:, None]
        assert np.all(fn.min_density(q) <= fn.density(q) + 1e-15)
        assert fn.neighbourhood_radius == fn.kde_bandwidth == silverman_bandwidth(X)

    def test_lengthscale_at_scalar(self, rng):
        X = rng.normal(size=(10, 2))
        fn = LengthscaleFunction(n=3.0, m=9.0, training_inputs=X)
        assert lengthscale_at(np.zeros(2), fn) == pytest.approx(fn(np.zeros((1, 2)))[0])

    @pytest.mark.parametrize("kwargs", [dict(n=0.0, m=1.0), dict(n=1.0, m=-1.0),
                                        dict(n=1.0, m=1.0, kde_bandwidth=0.0),
                                        dict(n=1.0, m=1.0, neighbourhood_radius=-1.0)])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            LengthscaleFunction(training_inputs=np.zeros((2, 1)), **kwargs)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 100), st.floats(0.1, 50),
           st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=10))
    def test_bounded_and_monotone(self, m, n, rhos):
        fn = LengthscaleFunction(n=n, m=m, training_inputs=np.zeros((1, 1)))
        rho = np.sort(np.asarray(rhos))
        ls = fn.lengthscale_from_density(rho)
        assert np.all(ls > 0) and np.all(ls <= m)
        assert np.all(np.diff(ls) <= 0)


class TestWeightedSum:
    def spec(self, w, kf=None, kg=None):
        kf = kf or eq(2.0, 1.0)
        kg = kg or eq(0.5, 3.0)
        return KernelSpec(Family.WEIGHTED_SUM, components=(kf, kg), weight_fn=w)

    def test_weight_one_gives_first_component(self, rng):
        X = rng.normal(size=(5, 1))
        K = weighted_sum_cov(X, X, self.spec(lambda X: np.ones(len(X))))
        np.testing.assert_allclose(K, eq_cov(X, X, eq(2.0, 1.0)))

    def test_cross_regime_is_exactly_zero(self):
        spec = self.spec(lambda X: (np.asarray(X)[:, 0] < 0).astype(float))
        for dist in (0.0, 1e-6, 1.0, 100.0):
            K = weighted_sum_cov([[-1e-12]], [[dist]], spec)
            assert K[0, 0] == 0.0

    def test_half_weight_halves_shared_kernel(self, rng):
        X = rng.normal(size=(4, 2))
        k = eq(1.5, 0.8)
        K = weighted_sum_cov(X, X, self.spec(lambda X: np.full(len(X), 0.5), k, k))
        np.testing.assert_allclose(K, eq_cov(X, X, k) / 2, rtol=1e-15)

    def test_weight_out_of_range(self):
        with pytest.raises(ValueError):
            weighted_sum_cov([[0.0]], [[1.0]], self.spec(lambda X: np.full(len(X), 1.5)))

    def test_missing_components(self):
        with pytest.raises(ValueError):
            KernelSpec(Family.WEIGHTED_SUM, components=(eq(),), weight_fn=lambda X: X)


class TestPSD:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2 ** 31), st.sampled_from(list(Family)))
    def test_gram_matrix_factorises(self, n, dim, seed, family):
        r = np.random.default_rng(seed)
        X = r.normal(size=(n, dim)) * r.uniform(0.1, 3)
        base = eq(r.uniform(0.1, 5), r.uniform(0.1, 3, size=dim))
        if family is Family.EQ:
            spec = base
        elif family is Family.GIBBS:
            spec = KernelSpec(Family.GIBBS, base.variance,
                              lengthscale_fn=LengthscaleFunction(r.uniform(1, 5), r.uniform(1, 5), X))
        else:
            spec = KernelSpec(Family.WEIGHTED_SUM, components=(base, eq(1.0, 2.0)),
                              weight_fn=lambda Z: 1 / (1 + np.exp(-np.asarray(Z)[:, 0])))
        K = covariance(X, X, spec)
        np.testing.assert_allclose(K, K.T, atol=1e-12)
        jitter = 1e-8 * max(np.mean(np.diag(K)), 1.0)
        np.linalg.cholesky(K + jitter * np.eye(n))


class TestHyperConfig:
    def test_kernel_and_scalar(self):
        th = HyperConfig(625, 1.0, 25.0)
        assert th.lengthscale_scalar == 625.0
        assert th.kernel().family is Family.EQ
        assert HyperConfig([2.0, 8.0], 1.0, 1.0).lengthscale_scalar == pytest.approx(4.0)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            HyperConfig(1.0, 1.0, -1.0)
        with pytest.raises(ValueError):
            HyperConfig(0.0, 1.0, 1.0)
