from __future__ import annotations

import math

import numpy as np
import pytest

from scenario_qd import cma_es


def minimize(f, mean0, sigma0, budget, seed=0):
    """Plain objective-ranked CMA-ES loop; returns best value and evaluations used."""
    rng = np.random.default_rng(seed)
    state = cma_es.init(mean0, sigma0)
    best, evals = math.inf, 0
    while evals < budget:
        x = cma_es.sample(state, rng)
        vals = np.array([f(v) for v in x])
        evals += len(x)
        best = min(best, vals.min())
        state = cma_es.update(state, x[np.argsort(vals, kind="stable")])
    return best, evals


class TestInit:
    def test_identity_covariance_and_zero_paths(self):
        s = cma_es.init(np.zeros(2), 1.0)
        assert np.array_equal(s.cov, np.eye(2))
        assert not s.path_sigma.any() and not s.path_c.any()

    def test_default_popsize(self):
        # 4 + floor(3 ln 10) = 4 + floor(6.9078) = 10
        assert cma_es.default_popsize(10) == 10
        assert cma_es.init(np.zeros(10), 1.0).lam == 10

    def test_weights(self):
        s = cma_es.init(np.zeros(5), 1.0, lam=12)
        w = s.weights
        assert len(w) == 6
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(w) < 0)
        raw = math.log(6.5) - np.log(np.arange(1, 7))
        np.testing.assert_allclose(w, raw / raw.sum(), rtol=1e-15)

    @pytest.mark.parametrize("sigma, lam", [(0.0, 4), (-1.0, 4), (1.0, 1)])
    def test_bad_configuration(self, sigma, lam):
        with pytest.raises(ValueError):
            cma_es.init(np.zeros(3), sigma, lam)


class TestSample:
    def test_tiny_sigma_collapses_to_mean(self):
        s = cma_es.init(np.ones(4), 1e-30, lam=6)
        x = cma_es.sample(s, np.random.default_rng(0))
        assert np.array_equal(x, np.ones((6, 4)))

    def test_empirical_mean(self):
        s = cma_es.init(np.array([1.0, -2.0, 0.5]), 1.0)
        x = cma_es.sample(s, np.random.default_rng(3), lam=10_000)
        se = 1.0 / math.sqrt(10_000)
        assert np.all(np.abs(x.mean(0) - s.mean) < 3 * se)

    def test_deterministic(self):
        s = cma_es.init(np.zeros(5), 0.3)
        a = cma_es.sample(s, np.random.default_rng(7))
        b = cma_es.sample(s, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_factorization_failure_flags_restart(self):
        s = cma_es.init(np.zeros(3), 1.0)
        s.cov = np.full((3, 3), np.nan)
        s.basis = None
        x = cma_es.sample(s, np.random.default_rng(0))
        assert s.needs_restart
        assert cma_es.should_restart(s, [1.0])
        assert np.array_equal(x, np.zeros((s.lam, 3)))

    def test_regularizes_singular_covariance_once(self):
        s = cma_es.init(np.zeros(3), 1.0)
        s.cov = np.diag([1.0, 1.0, 0.0])
        s.basis = None
        cma_es.sample(s, np.random.default_rng(0))
        assert not s.needs_restart
        assert np.linalg.eigvalsh(s.cov)[0] > 0


class TestUpdate:
    def test_single_parent_becomes_mean(self):
        s = cma_es.init(np.zeros(3), 1.0, lam=2)
        x = cma_es.sample(s, np.random.default_rng(0))
        new = cma_es.update(s, x)
        np.testing.assert_allclose(new.mean, x[0], rtol=0, atol=1e-15)

    def test_copies_of_mean_keep_mean(self):
        s = cma_es.init(np.array([1.0, 2.0]), 0.5, lam=6)
        new = cma_es.update(s, np.repeat(s.mean[None, :], 6, axis=0))
        assert np.array_equal(new.mean, s.mean)

    def test_shape_mismatch(self):
        s = cma_es.init(np.zeros(3), 1.0, lam=6)
        with pytest.raises(ValueError):
            cma_es.update(s, np.zeros((5, 3)))

    def test_does_not_mutate_input(self):
        s = cma_es.init(np.zeros(3), 1.0)
        before = (s.mean.copy(), s.cov.copy(), s.sigma)
        cma_es.update(s, cma_es.sample(s, np.random.default_rng(0)))
        assert np.array_equal(s.mean, before[0]) and np.array_equal(s.cov, before[1]) and s.sigma == before[2]

    def test_covariance_symmetric_positive_definite(self):
        rng = np.random.default_rng(2)
        s = cma_es.init(np.zeros(6), 1.0)
        for _ in range(50):
            x = cma_es.sample(s, rng)
            s = cma_es.update(s, x[np.argsort(np.sum(x**2 * np.arange(1, 7), axis=1))])
            assert np.array_equal(s.cov, s.cov.T)
            assert np.linalg.eigvalsh(s.cov)[0] > 1e-18

    def test_tied_ranks_share_weights(self):
        rng = np.random.default_rng(5)
        s = cma_es.init(np.zeros(4), 1.0, lam=8)
        x = cma_es.sample(s, rng)
        values = [5.0, 4.0, 4.0, 4.0, 2.0, 1.0, 0.0, -1.0]
        perm = [0, 3, 1, 2, 4, 5, 6, 7]
        a = cma_es.update(s, x, values)
        b = cma_es.update(s, x[perm], [values[i] for i in perm])
        assert np.array_equal(a.mean, b.mean)

    def test_deterministic_trajectory(self):
        def trace(seed):
            rng = np.random.default_rng(seed)
            s = cma_es.init(np.ones(4), 0.5)
            for _ in range(20):
                x = cma_es.sample(s, rng)
                s = cma_es.update(s, x[np.argsort((x**2).sum(1))])
            return s

        a, b = trace(9), trace(9)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov) and a.sigma == b.sigma


class TestRestart:
    def test_no_improvement(self):
        assert cma_es.should_restart(cma_es.init(np.zeros(2), 1.0), [0.0, -1.0, 0.0])

    def test_healthy(self):
        assert not cma_es.should_restart(cma_es.init(np.zeros(2), 1.0), [0.0, 0.5, -1.0])

    def test_tiny_sigma(self):
        s = cma_es.init(np.zeros(2), 1.0)
        s.sigma = 1e-15
        assert cma_es.should_restart(s, [1.0])

    def test_ill_conditioned(self):
        s = cma_es.init(np.zeros(2), 1.0)
        s.cov = np.diag([1.0, 1e-15])
        s.basis = s.scales = None
        assert cma_es.should_restart(s, [1.0])


def test_sphere_convergence():
    best, evals = minimize(lambda x: float(x @ x), 3.0 * np.ones(10), 0.5, 3000)
    assert best < 1e-10
    assert evals <= 3000


def test_convex_quadratic_within_budget():
    scales = np.logspace(0, 3, 10)
    best, _ = minimize(lambda x: float(np.sum(scales * (x - 1.0) ** 2)), np.zeros(10), 1.0, 10_000, seed=1)
    assert best < 1e-8
