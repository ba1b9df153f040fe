from __future__ import annotations

import math

import numpy as np
import pytest

from scenario_qd import cma_es
from scenario_qd.archive import AddStatus, ArchiveConfig, GridArchive, Solution
from scenario_qd.emitters import (
    GaussianEmitter,
    GradientEmitter,
    ImprovementEmitter,
    arborescence,
    rank_by_improvement,
)
from scenario_qd.scheduler import ExperimentConfig, Search

CFG = ArchiveConfig((0.0, 0.0), (1.0, 1.0), (10, 10))


def archive_with(*params, f=1.0):
    a = GridArchive(CFG)
    for i, p in enumerate(params):
        a.add(Solution(np.asarray(p, dtype=float), f, np.array([(i % 10) / 10 + 0.05, 0.05])))
    return a


def assert_same_state(a: cma_es.CmaState, b: cma_es.CmaState):
    for name in ("mean", "cov", "path_sigma", "path_c"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.sigma == b.sigma and a.iteration == b.iteration


class TestRanking:
    def test_sorted_input_unchanged(self):
        assert rank_by_improvement([98.7, 1.0, -2.0], [99.0, 100.0, 3.0]).tolist() == [0, 1, 2]

    def test_ties_broken_by_objective_then_position(self):
        order = rank_by_improvement([1.0, 2.0, 1.0, 1.0], [5.0, 0.0, 7.0, 5.0])
        assert order.tolist() == [1, 2, 0, 3]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rank_by_improvement([1.0], [1.0, 2.0])


class TestGaussian:
    def test_zero_sigma_copies_parent(self):
        em = GaussianEmitter(np.zeros(2), 0.0, 4, np.random.default_rng(0))
        x = em.ask(archive_with([1.0, 1.0]))
        assert np.array_equal(x, np.ones((4, 2)))

    def test_empty_archive_reproducible(self):
        a = GaussianEmitter(np.zeros(3), 1.0, 5, np.random.default_rng(4)).ask(GridArchive(CFG))
        b = GaussianEmitter(np.zeros(3), 1.0, 5, np.random.default_rng(4)).ask(GridArchive(CFG))
        assert np.array_equal(a, b)

    def test_mean_around_parent(self):
        em = GaussianEmitter(np.zeros(2), 0.7, 10_000, np.random.default_rng(1))
        x = em.ask(archive_with([2.0, -1.0]))
        se = 0.7 / math.sqrt(10_000)
        assert np.all(np.abs(x.mean(0) - [2.0, -1.0]) < 3 * se)

    def test_parents_uniform_over_elites(self):
        em = GaussianEmitter(np.zeros(1), 0.0, 30_000, np.random.default_rng(2))
        x = em.ask(archive_with([0.0], [1.0], [2.0]))
        counts = np.bincount(x[:, 0].astype(int), minlength=3)
        p, n = 1 / 3, 30_000
        assert np.all(np.abs(counts - n * p) < 3 * math.sqrt(n * p * (1 - p)))


class TestImprovementEmitter:
    def test_restart_when_nothing_improves(self):
        archive = archive_with([4.0, 4.0])
        em = ImprovementEmitter(np.zeros(2), 0.5, 6, np.random.default_rng(0))
        x = em.ask()
        em.tell(x, np.zeros(6), [0.0, -1.0, 0.0, -2.0, 0.0, 0.0], [AddStatus.REJECTED] * 6, archive)
        assert em.restarts == 1
        assert np.array_equal(em.cma.mean, [4.0, 4.0])
        assert em.cma.sigma == 0.5

    def test_restart_on_empty_archive_uses_start(self):
        em = ImprovementEmitter(np.full(2, 0.25), 0.5, 4, np.random.default_rng(0))
        x = em.ask()
        em.tell(x, np.zeros(4), [0.0] * 4, [AddStatus.REJECTED] * 4, GridArchive(CFG))
        assert np.array_equal(em.cma.mean, [0.25, 0.25])

    def test_mismatched_batch(self):
        em = ImprovementEmitter(np.zeros(2), 0.5, 6, np.random.default_rng(0))
        x = em.ask()
        with pytest.raises(ValueError):
            em.tell(x[:5], np.zeros(5), [1.0] * 5, [AddStatus.NEW_CELL] * 5, GridArchive(CFG))

    def test_constant_shift_in_improvement_is_invisible(self):
        rng = np.random.default_rng(3)
        imp = rng.random(8) + 0.1
        obj = rng.random(8)
        states = []
        for shift in (0.0, 17.0):
            em = ImprovementEmitter(np.zeros(3), 0.5, 8, np.random.default_rng(0))
            x = em.ask()
            em.tell(x, obj, imp + shift, [AddStatus.IMPROVED] * 8, GridArchive(CFG))
            states.append(em.cma)
        assert_same_state(*states)

    def test_zero_learning_rate_matches_plain_cma(self):
        cfg = ArchiveConfig((-50.0, -50.0), (50.0, 50.0), (25, 25), learning_rate=0.0)
        archive = GridArchive(cfg)
        em = ImprovementEmitter(np.ones(4), 0.5, 8, np.random.default_rng(11))
        plain = em.cma.copy()
        for _ in range(3):
            x = em.ask()
            f = 100.0 - np.sum((x - 0.3) ** 2, axis=1)
            results = [archive.add(Solution(xi, fi, xi[:2])) for xi, fi in zip(x, f)]
            em.tell(x, f, [r.improvement for r in results], [r.status for r in results], archive)
            plain = cma_es.update(plain, x[np.argsort(-f, kind="stable")])
            assert_same_state(em.cma, plain)


class TestArborescence:
    def test_worked_example(self):
        out = arborescence([0.0, 0.0], [1.0, 0.0], [[0.0, 2.0]], [[1.0, 0.5]])
        np.testing.assert_array_equal(out, [[1.0, 0.5]])

    def test_zero_coefficients(self):
        anchor = np.array([0.3, -1.2, 4.0])
        out = arborescence(anchor, [1.0, 2.0, 3.0], [[0.0, 1.0, 0.0]], np.zeros((3, 2)))
        assert np.array_equal(out, np.repeat(anchor[None, :], 3, axis=0))

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(0)
        anchor, gf, gm, c = rng.random(5), rng.random(5), rng.random((2, 5)), rng.standard_normal((4, 3))
        base = arborescence(anchor, gf, gm, c)
        assert np.array_equal(base, arborescence(anchor, 8.0 * gf, gm * np.array([[4.0], [0.5]]), c))
        # 10 is not a power of two, so normalization may round differently in the last bit.
        np.testing.assert_allclose(base, arborescence(anchor, 10.0 * gf, gm, c), rtol=0, atol=1e-15)

    def test_objective_coefficient_forced_non_negative(self):
        out = arborescence([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], [[-2.0, 0.0]])
        np.testing.assert_array_equal(out, [[2.0, 0.0]])

    def test_zero_gradient_passes_through(self):
        out = arborescence([1.0, 1.0], [0.0, 0.0], [[0.0, 3.0]], [[5.0, 1.0]])
        np.testing.assert_array_equal(out, [[1.0, 2.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            arborescence([0.0, 0.0], [1.0, 0.0, 0.0], [[0.0, 1.0]], [[1.0, 1.0]])
        with pytest.raises(ValueError):
            arborescence([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], [[1.0, 1.0, 1.0]])


class TestGradientEmitter:
    def make(self, batch=4):
        em = GradientEmitter(np.zeros(3), 1.0, batch, 2, np.random.default_rng(0))
        em.set_gradients(np.array([1.0, 0.0, 0.0]), np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        return em

    def test_anchor_moves_to_best_improvement(self):
        em = self.make(batch=2)
        x = em.ask()
        em.tell(x, np.ones(2), [0.0, 3.0], [AddStatus.REJECTED, AddStatus.NEW_CELL], GridArchive(CFG))
        assert np.array_equal(em.anchor, x[1])
        assert em.restarts == 0

    def test_restart_redraws_anchor(self):
        archive = archive_with([7.0, 7.0, 7.0])
        em = self.make()
        x = em.ask()
        em.tell(x, np.ones(4), [0.0, -1.0, 0.0, 0.0], [AddStatus.REJECTED] * 4, archive)
        assert em.restarts == 1
        assert np.array_equal(em.anchor, [7.0, 7.0, 7.0])
        assert np.array_equal(em.cma.mean, np.zeros(3))

    def test_ask_requires_gradients(self):
        em = GradientEmitter(np.zeros(3), 1.0, 4, 2, np.random.default_rng(0))
        with pytest.raises(RuntimeError):
            em.ask()

    def test_gradient_shape_checked(self):
        em = GradientEmitter(np.zeros(3), 1.0, 4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            em.set_gradients(np.zeros(2), np.zeros((2, 3)))

    def test_tell_mismatch(self):
        em = self.make()
        x = em.ask()
        with pytest.raises(ValueError):
            em.tell(x[:3], np.ones(3), [1.0] * 3, [AddStatus.NEW_CELL] * 3, GridArchive(CFG))


def test_gradient_search_improves_every_iteration():
    search = Search(ExperimentConfig(algorithm="cma-mega", domain="sphere-lp", seed=3, budget=10**6))
    prev = -1.0
    for _ in range(10):
        search.step()
        qd = search.archive.qd_score()
        assert qd > prev
        prev = qd
