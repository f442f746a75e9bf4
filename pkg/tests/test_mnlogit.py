import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elfuse import (
    ConvergenceError,
    PrimaryDataset,
    class_probs,
    fit_mle,
    log_lik,
    probs_matrix,
    score_and_hessian,
)
from elfuse.simengine import ScenarioConfig, _gen_features, gen_labels


def toy_dataset(n=60, p=3, K=3, seed=0, theta=None):
    rng = np.random.default_rng(seed)
    design = np.concatenate([np.ones((n, 1)), rng.standard_normal((n, p - 1))], axis=1)
    if theta is None:
        labels = rng.integers(1, K + 1, size=n)
    else:
        labels = gen_labels(design, np.asarray(theta, float), rng)
    return PrimaryDataset(labels=labels, design=design,
                          z_columns=tuple(range(1, p + 1)), n_classes=K)


class TestClassProbs:
    def test_zero_coefficients_uniform(self):
        p = class_probs(np.array([1.0, 2.0, -1.0]), np.zeros(6))
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)

    def test_hand_value(self):
        # logits (ln 2, 0) with reference zero: denominator 1 + 2 + 1 = 4
        p = class_probs(np.array([1.0, 1.0]), np.array([math.log(2), 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(p, [0.5, 0.25, 0.25], atol=1e-14)

    def test_saturation_is_finite(self):
        p = class_probs(np.array([1.0, 1.0]), np.array([25.0, 25.0, 0.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] > 0.999999

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_simplex(self, seed):
        # coefficient/covariate scales keep logit spreads representable
        rng = np.random.default_rng(seed)
        x = np.concatenate([[1.0], 2 * rng.standard_normal(2)])
        theta = 2 * rng.standard_normal(6)
        p = class_probs(x, theta)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0) and np.all(p < 1)

    def test_reference_shift_invariance(self):
        # shifting every class logit (reference included) by a constant
        # leaves the probabilities unchanged
        rng = np.random.default_rng(3)
        x = np.array([1.0, 0.7, -0.4])
        theta = rng.standard_normal(6)
        logits = np.array([x @ theta[:3], x @ theta[3:], 0.0])
        for c in (-40.0, -1.0, 3.0, 55.0):
            shifted = np.exp(logits + c - (logits + c).max())
            np.testing.assert_allclose(
                class_probs(x, theta), shifted / shifted.sum(), atol=1e-12
            )


class TestLogLik:
    def test_zero_theta(self):
        ds = toy_dataset()
        assert abs(log_lik(ds, np.zeros(6)) + math.log(3)) < 1e-12

    def test_hand_value(self):
        # two observations, two classes: 0.5*[log sigma(0) + log(1 - sigma(1))]
        design = np.array([[1.0, 0.0], [1.0, 1.0]])
        ds = PrimaryDataset(labels=[1, 2], design=design, z_columns=(1, 2), n_classes=2)
        theta = np.array([0.0, 1.0])
        sigma = lambda t: 1.0 / (1.0 + math.exp(-t))
        expected = 0.5 * (math.log(sigma(0.0)) + math.log(1.0 - sigma(1.0)))
        assert abs(log_lik(ds, theta) - expected) < 1e-14
        assert abs(expected - (-1.003204434039084)) < 1e-12

    def test_reference_class_saturation(self):
        design = np.array([[1.0, 0.0]])
        ds = PrimaryDataset(labels=[2], design=design, z_columns=(1, 2), n_classes=2)
        val = log_lik(ds, np.array([-40.0, 0.0]))
        assert -1e-10 < val <= 0.0

    def test_concave_along_segments(self):
        ds = toy_dataset(seed=5)
        rng = np.random.default_rng(7)
        for _ in range(10):
            a, b = rng.standard_normal((2, 6))
            ts = np.linspace(0, 1, 21)
            vals = np.array([log_lik(ds, (1 - t) * a + t * b) for t in ts])
            second = np.diff(vals, 2)
            assert np.all(second <= 1e-10)


class TestDerivatives:
    def test_gradient_matches_fd(self):
        ds = toy_dataset(seed=2)
        rng = np.random.default_rng(4)
        for _ in range(5):
            theta = rng.standard_normal(6)
            grad, _ = score_and_hessian(ds, theta)
            h = 1e-6
            fd = np.zeros(6)
            for i in range(6):
                e = np.zeros(6)
                e[i] = h
                fd[i] = (log_lik(ds, theta + e) - log_lik(ds, theta - e)) / (2 * h)
            assert np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-5

    def test_hessian_matches_fd(self):
        ds = toy_dataset(seed=3)
        rng = np.random.default_rng(5)
        theta = rng.standard_normal(6)
        _, hess = score_and_hessian(ds, theta)
        h = 1e-6
        fd = np.zeros((6, 6))
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            gp, _ = score_and_hessian(ds, theta + e)
            gm, _ = score_and_hessian(ds, theta - e)
            fd[:, i] = (gp - gm) / (2 * h)
        assert np.max(np.abs(hess - fd)) / np.max(np.abs(fd)) < 1e-4

    def test_hessian_symmetric_nsd(self):
        ds = toy_dataset(seed=6)
        _, hess = score_and_hessian(ds, np.zeros(6))
        np.testing.assert_allclose(hess, hess.T, atol=1e-12)
        assert np.linalg.eigvalsh(hess).max() <= 1e-10

    def test_balanced_centered_zero_intercept_gradient(self):
        x = np.array([[1.0, 1.0], [1.0, -1.0], [1.0, 0.5], [1.0, -0.5]])
        ds = PrimaryDataset(labels=[1, 2, 2, 1], design=x, z_columns=(1, 2), n_classes=2)
        grad, _ = score_and_hessian(ds, np.zeros(2))
        assert abs(grad[0]) < 1e-14


class TestFitMle:
    def test_monte_carlo_sanity(self):
        config = ScenarioConfig(
            n=500, N=100, p=5, n_classes=3,
            theta_true=(0.2, 1, -1, 1, -1, -0.1, -1, 1, 1, 1),
            phi_free_true=(0.35, -0.25),
            groups=((1, 3), (2,)), reps=1, seed=0, B=10,
        )
        truth = np.asarray(config.theta_true)
        rng = np.random.default_rng(12)
        X = _gen_features(config, "primary", 500, rng)
        y = gen_labels(X, truth, rng)
        ds = PrimaryDataset(labels=y, design=X, z_columns=config.z_columns, n_classes=3)
        fit = fit_mle(ds)
        se = np.sqrt(np.diag(np.linalg.inv(fit.info)) / 500)
        assert np.all(np.abs(fit.theta_hat - truth) <= 3 * se)
        grad, _ = score_and_hessian(ds, fit.theta_hat)
        assert np.max(np.abs(grad)) < 1e-8
        assert np.linalg.eigvalsh(fit.info).min() > 0
        np.testing.assert_allclose(fit.info, fit.info.T, atol=1e-10)

    def test_degenerate_all_reference_labels(self):
        # the likelihood has no interior maximum; pushing the tolerance
        # forces either the separation flag or a convergence failure
        rng = np.random.default_rng(0)
        design = np.concatenate([np.ones((30, 1)), rng.standard_normal((30, 1))], axis=1)
        ds = PrimaryDataset(labels=[2] * 30, design=design, z_columns=(1, 2), n_classes=2)
        with pytest.warns(UserWarning):
            try:
                fit = fit_mle(ds, tol=1e-15, max_iter=200)
                assert fit.separation
            except ConvergenceError:
                pass

    def test_refit_is_fixed_point(self):
        ds = toy_dataset(seed=9, theta=(0.3, -0.5, 0.2, 0.4, 0.1, -0.2))
        fit = fit_mle(ds)
        refit = fit_mle(ds, start=fit.theta_hat)
        assert refit.iterations <= 2
        assert abs(refit.loglik - fit.loglik) < 1e-12

    def test_small_sample_warns(self):
        ds = toy_dataset(n=5, p=3, K=3, seed=1)
        with pytest.warns(UserWarning, match="poorly determined"):
            try:
                fit_mle(ds, max_iter=5)
            except ConvergenceError:
                pass

    def test_nonconvergence_carries_last_iterate(self):
        ds = toy_dataset(seed=2, theta=(1.0, 0.5, -0.5, -1.0, 0.3, 0.7))
        with pytest.raises(ConvergenceError) as err:
            fit_mle(ds, max_iter=1, tol=1e-14)
        assert err.value.last is not None
