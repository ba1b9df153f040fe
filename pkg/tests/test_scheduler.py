from __future__ import annotations

import numpy as np
import pytest

from scenario_qd.archive import AddResult, AddStatus, GridArchive
from scenario_qd.domains import EvalBatch, SphereLP, Teleop
from scenario_qd.emitters import GaussianEmitter
from scenario_qd.scheduler import (
    THREADS_ENV,
    EvaluationError,
    ExperimentConfig,
    LabeledBatch,
    Search,
    ask_all,
    emitter_streams,
    evaluate_batch,
    run,
    tell_all,
)


def small(**kw):
    base = dict(algorithm="cma-mae", domain="sphere-lp", budget=720, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            ExperimentConfig(algorithm="nsga")

    def test_elitist_requires_unit_learning_rate(self):
        with pytest.raises(ValueError):
            ExperimentConfig(algorithm="cma-me", learning_rate=0.5)

    def test_defaults_materialized(self):
        r = ExperimentConfig(algorithm="cma-mae").resolved()
        assert (r.learning_rate, r.emitters, r.batch_size) == (0.1, 3, 12)
        r = ExperimentConfig(algorithm="map-elites").resolved()
        assert (r.learning_rate, r.emitters, r.batch_size) == (1.0, 1, 36)

    def test_gradient_algorithm_needs_gradients(self):
        with pytest.raises(ValueError, match="gradients"):
            Search(ExperimentConfig(algorithm="cma-maega", domain="teleop"))


class TestRun:
    def test_zero_budget(self):
        archive, stats = run(small(budget=0))
        assert archive.empty and stats.rows == [] and stats.evaluations == 0

    def test_deterministic(self):
        for alg in ("map-elites", "cma-me", "cma-mae", "cma-mega", "cma-maega", "uniform-baseline"):
            a, sa = run(small(algorithm=alg, learning_rate=None))
            b, sb = run(small(algorithm=alg, learning_rate=None))
            assert a.to_csv() == b.to_csv() and sa.to_csv() == sb.to_csv(), alg

    def test_seed_matters(self):
        assert run(small(seed=1))[0].to_csv() != run(small(seed=2))[0].to_csv()

    @pytest.mark.parametrize("alg", ["cma-mae", "cma-mega", "map-elites"])
    def test_budget_exact_and_qd_monotone(self, alg):
        _, stats = run(small(algorithm=alg, budget=1000))
        assert stats.evaluations == 1000
        evals = [r["evals"] for r in stats.rows]
        qd = [r["qd_score"] for r in stats.rows]
        assert evals == sorted(evals) and evals[-1] == 1000
        assert all(b >= a for a, b in zip(qd, qd[1:]))

    def test_gradient_anchor_evaluations_count(self):
        search = Search(small(algorithm="cma-mega", budget=10**6))
        search.step()
        # 3 anchors with gradients plus 36 branches.
        assert search.stats.evaluations == 39

    def test_uniform_baseline_inside_box(self):
        search = Search(small(algorithm="uniform-baseline", domain="teleop", budget=72))
        search.run()
        assert search.stats.evaluations == 72
        for _, e in search.archive:
            assert np.all(e.params >= search.domain.spec.param_lower)
            assert np.all(e.params <= search.domain.spec.param_upper)

    def test_targets_stop_early(self):
        _, stats = run(small(budget=10**6, target_coverage=0.05))
        assert stats.rows[-1]["coverage"] >= 0.05
        assert stats.evaluations < 10**6

    def test_threads_do_not_change_results(self, monkeypatch):
        cfg = small(domain="teleop", budget=144)
        ref = run(cfg)[0].to_csv()
        monkeypatch.setenv(THREADS_ENV, "3")
        assert run(cfg)[0].to_csv() == ref

    def test_repaired_candidates_are_archived_valid(self):
        from scenario_qd.domains import validity

        archive, stats = run(small(domain="teleop", budget=360))
        assert stats.evaluations == 360
        assert all(validity(e.params) == [] for e in archive.elites())


class TestBatches:
    def test_two_emitters_of_five(self):
        rngs = emitter_streams(0, 2)
        ems = [GaussianEmitter(np.zeros(3), 0.1, 5, r) for r in rngs]
        batch = ask_all(ems, GridArchive(small().archive_config(SphereLP())))
        assert batch.params.shape == (10, 3)
        assert batch.owner.tolist() == [0] * 5 + [1] * 5

    def test_permuted_evaluation_order(self):
        dom = SphereLP()
        x = np.random.default_rng(0).uniform(-5, 5, (12, 20))
        ref = evaluate_batch(dom, x)
        perm = evaluate_batch(dom, x, order=np.random.default_rng(1).permutation(12))
        assert np.array_equal(ref.objective, perm.objective) and np.array_equal(ref.measures, perm.measures)

    def test_single_emitter(self):
        _, stats = run(small(emitters=1, batch_size=8, budget=80))
        assert stats.evaluations == 80 and len(stats.rows) == 10

    def test_tell_all_provenance_mismatch(self):
        ems = [GaussianEmitter(np.zeros(2), 0.1, 2, np.random.default_rng(0))]
        batch = LabeledBatch(np.zeros((2, 2)), np.array([0, 0]))
        res = [AddResult(AddStatus.REJECTED, 0.0, (0, 0))]
        with pytest.raises(ValueError):
            tell_all(ems, batch, np.zeros(2), res, None)
        with pytest.raises(ValueError):
            tell_all(ems + ems, batch, np.zeros(2), res * 2, None)

    def test_streams_independent_and_reproducible(self):
        a = [g.random() for g in emitter_streams(5, 3)]
        b = [g.random() for g in emitter_streams(5, 3)]
        assert a == b and len(set(a)) == 3


class Exploding(SphereLP):
    def evaluate(self, params):
        raise ValueError("simulator crashed")


def test_evaluation_error_carries_params():
    x = np.ones((2, 20))
    with pytest.raises(EvaluationError) as info:
        evaluate_batch(Exploding(), x)
    assert np.array_equal(info.value.params, x)


def test_stats_csv_header():
    _, stats = run(small(budget=36))
    assert stats.to_csv().splitlines()[0] == "iteration,evals,qd_score,coverage,best_objective"


def test_invalid_teleop_input_is_an_evaluation_error():
    bad = np.array([[0.5, 0.5, 0.5, 0.5, 0.9, 0.9, 0.1, 1.0, 0.2]])
    with pytest.raises(EvaluationError, match="separation"):
        evaluate_batch(Teleop(), bad)


def test_eval_batch_length():
    assert len(EvalBatch(np.zeros(3), np.zeros((3, 2)))) == 3
