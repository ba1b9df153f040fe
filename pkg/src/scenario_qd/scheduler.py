"""The sample -> repair -> evaluate -> archive -> tell loop."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .archive import AddResult, AddStatus, ArchiveConfig, GridArchive, Solution
from .domains import Domain, EvalBatch, make_domain
from .emitters import GaussianEmitter, GradientEmitter, ImprovementEmitter

log = logging.getLogger(__name__)

ALGORITHMS = ("map-elites", "cma-me", "cma-mae", "cma-mega", "cma-maega", "uniform-baseline")
GRADIENT_ALGORITHMS = ("cma-mega", "cma-maega")
ELITIST_ALGORITHMS = ("map-elites", "cma-me", "cma-mega")
THREADS_ENV = "SCENARIO_QD_THREADS"
STATS_FIELDS = ("iteration", "evals", "qd_score", "coverage", "best_objective")


class EvaluationError(RuntimeError):
    def __init__(self, message: str, params: np.ndarray):
        super().__init__(f"{message} (params={np.asarray(params).tolist()})")
        self.params = params


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "cma-mae"
    domain: str = "sphere-lp"
    domain_options: dict[str, Any] = field(default_factory=dict)
    resolution: tuple[int, ...] = (25, 25)
    learning_rate: float | None = None
    threshold_floor: float = 0.0
    emitters: int | None = None
    batch_size: int | None = None
    budget: int = 10_000
    seed: int = 0
    sigma: float | None = None
    gradient_sigma: float = 1.0
    gradient_step: float = 1.0
    target_qd_score: float | None = None
    target_coverage: float | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.learning_rate is not None and self.algorithm in ELITIST_ALGORITHMS and self.learning_rate != 1.0:
            raise ValueError(f"{self.algorithm} uses an elitist archive; learning_rate must be 1")

    def resolved(self) -> ExperimentConfig:
        """Copy with every per-algorithm default materialized."""
        cma = self.algorithm.startswith("cma")
        return replace(
            self,
            learning_rate=self.learning_rate
            if self.learning_rate is not None
            else (0.1 if self.algorithm in ("cma-mae", "cma-maega") else 1.0),
            emitters=self.emitters if self.emitters is not None else (3 if cma else 1),
            batch_size=self.batch_size if self.batch_size is not None else (12 if cma else 36),
        )

    def archive_config(self, domain: Domain) -> ArchiveConfig:
        cfg = self.resolved()
        k = domain.spec.n_measures
        res = tuple(cfg.resolution)
        if len(res) == 1:
            res = res * k
        if len(res) != k:
            raise ValueError(f"resolution has {len(res)} entries but domain has {k} measures")
        return ArchiveConfig(
            lower_bounds=domain.spec.measure_lower,
            upper_bounds=domain.spec.measure_upper,
            resolution=res,
            learning_rate=cfg.learning_rate,
            threshold_floor=cfg.threshold_floor,
        )


@dataclass
class RunStats:
    rows: list[dict[str, float]] = field(default_factory=list)
    evaluations: int = 0
    discarded: int = 0
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        lines = [",".join(STATS_FIELDS)]
        for row in self.rows:
            lines.append(",".join(repr(row[k]) for k in STATS_FIELDS))
        return "\n".join(lines) + "\n"


def emitter_streams(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators spawned from the master seed (SeedSequence spawning)."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(count)]


def build_emitters(config: ExperimentConfig, domain: Domain, rngs: Sequence[np.random.Generator]) -> list:
    cfg = config.resolved()
    spec = domain.spec
    sigma = cfg.sigma if cfg.sigma is not None else spec.default_sigma
    x0 = spec.start
    if cfg.algorithm == "map-elites":
        return [GaussianEmitter(x0, sigma, cfg.batch_size, rngs[i]) for i in range(cfg.emitters)]
    if cfg.algorithm in ("cma-me", "cma-mae"):
        return [ImprovementEmitter(x0, sigma, cfg.batch_size, rngs[i]) for i in range(cfg.emitters)]
    if cfg.algorithm in GRADIENT_ALGORITHMS:
        return [
            GradientEmitter(x0, cfg.gradient_sigma, cfg.batch_size, spec.n_measures, rngs[i], cfg.gradient_step)
            for i in range(cfg.emitters)
        ]
    return []


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def evaluate_batch(domain: Domain, params: np.ndarray, gradients: bool = False, order=None) -> EvalBatch:
    """Evaluate rows of ``params``; results are reassembled in row order.

    ``order`` optionally permutes the evaluation schedule (rows are still
    returned in their original positions).
    """
    fn = domain.evaluate_with_gradients if gradients else domain.evaluate
    n = len(params)
    if n == 0:
        k = domain.spec.n_measures
        return EvalBatch(np.zeros(0), np.zeros((0, k)))
    threads = _threads()
    if order is None and threads == 1:
        try:
            return fn(params)
        except (ValueError, FloatingPointError) as err:
            raise EvaluationError(str(err), params) from err
    order = np.arange(n) if order is None else np.asarray(order)

    def one(i):
        try:
            return i, fn(params[i : i + 1])
        except (ValueError, FloatingPointError) as err:
            raise EvaluationError(str(err), params[i]) from err

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = dict(pool.map(one, order))
    else:
        parts = dict(one(i) for i in order)
    chunks = [parts[i] for i in range(n)]
    cat = lambda name: None if getattr(chunks[0], name) is None else np.concatenate([getattr(c, name) for c in chunks])  # noqa: E731
    return EvalBatch(
        objective=cat("objective"),
        measures=cat("measures"),
        occupancy=cat("occupancy"),
        grad_objective=cat("grad_objective"),
        grad_measures=cat("grad_measures"),
    )


@dataclass
class LabeledBatch:
    params: np.ndarray
    owner: np.ndarray  # emitter index per row (-1 for baseline samples)


def ask_all(emitters: Sequence, archive: GridArchive) -> LabeledBatch:
    parts, owners = [], []
    for i, em in enumerate(emitters):
        x = np.atleast_2d(em.ask(archive))
        parts.append(x)
        owners.append(np.full(len(x), i))
    return LabeledBatch(np.concatenate(parts), np.concatenate(owners))


def tell_all(
    emitters: Sequence,
    batch: LabeledBatch,
    objectives: np.ndarray,
    results: Sequence[AddResult],
    archive: GridArchive,
) -> None:
    if len(results) != len(batch.params) or len(objectives) != len(batch.params):
        raise ValueError("add results do not line up with the asked batch")
    for i, em in enumerate(emitters):
        rows = np.flatnonzero(batch.owner == i)
        if rows.size == 0:
            raise ValueError(f"no solutions in the batch belong to emitter {i}")
        em.tell(
            batch.params[rows],
            objectives[rows],
            [results[r].improvement for r in rows],
            [results[r].status for r in rows],
            archive,
        )


class Search:
    """Stateful QD search; ``step`` runs one iteration, ``run`` loops to the budget."""

    def __init__(self, config: ExperimentConfig, domain: Domain | None = None, archive: GridArchive | None = None):
        self.config = config.resolved()
        self.domain = domain if domain is not None else make_domain(config.domain, **config.domain_options)
        if self.config.algorithm in GRADIENT_ALGORITHMS and not self.domain.spec.gradients:
            raise ValueError(f"{self.config.algorithm} requires a domain with gradients; {self.domain.spec.name} has none")
        self.archive = archive if archive is not None else GridArchive(self.config.archive_config(self.domain))
        n_em = self.config.emitters
        rngs = emitter_streams(self.config.seed, n_em + 1)
        self.baseline_rng = rngs[-1]
        self.emitters = build_emitters(self.config, self.domain, rngs)
        self.iteration = 0
        self.stats = RunStats()

    @property
    def remaining(self) -> int:
        return self.config.budget - self.stats.evaluations

    def done(self) -> bool:
        if self.remaining <= 0:
            return True
        cfg = self.config
        if cfg.target_qd_score is not None and self.archive.qd_score() >= cfg.target_qd_score:
            return True
        if cfg.target_coverage is not None and self.archive.coverage() >= cfg.target_coverage:
            return True
        return False

    def _insert(self, params: np.ndarray, ok: np.ndarray, ev: EvalBatch | None, rows: np.ndarray) -> tuple[np.ndarray, list[AddResult]]:
        """Add evaluated rows in canonical order; discarded rows get -inf feedback."""
        objectives = np.full(len(params), -math.inf)
        results: list[AddResult] = []
        k = 0
        for r in range(len(params)):
            if not ok[r]:
                results.append(AddResult(AddStatus.REJECTED, -math.inf, (), error="repair failed"))
                continue
            j = rows[k]
            k += 1
            occ = None if ev.occupancy is None else ev.occupancy[j]
            sol = Solution(params[r], ev.objective[j], ev.measures[j], {"occupancy": occ} if occ is not None else {})
            objectives[r] = sol.objective
            results.append(self.archive.add(sol))
        return objectives, results

    def _prepare(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not self.domain.spec.needs_repair:
            return params, np.ones(len(params), dtype=bool)
        fixed, _, ok = self.domain.repair(params)
        self.stats.discarded += int((~ok).sum())
        return fixed, ok

    def _evaluate(self, params: np.ndarray, ok: np.ndarray, gradients: bool = False):
        good = np.flatnonzero(ok)
        ev = evaluate_batch(self.domain, params[good], gradients=gradients) if good.size else None
        self.stats.evaluations += int(good.size)
        return ev, np.arange(good.size)

    def step(self) -> None:
        remaining = self.remaining
        if remaining <= 0:
            return
        grads_ok = True
        if self.config.algorithm in GRADIENT_ALGORITHMS:
            anchors = np.stack([em.anchor for em in self.emitters])
            if len(anchors) > remaining:
                grads_ok = False
                anchors = anchors[:remaining]
            if self.domain.spec.needs_repair:
                fixed, _, ok = self.domain.repair(anchors)
                anchors = np.where(ok[:, None], fixed, anchors)
                for em, a in zip(self.emitters, anchors):
                    em.anchor = a.copy()
            ev = evaluate_batch(self.domain, anchors, gradients=True)
            self.stats.evaluations += len(anchors)
            self._insert(anchors, np.ones(len(anchors), dtype=bool), ev, np.arange(len(anchors)))
            if grads_ok:
                for i, em in enumerate(self.emitters):
                    em.set_gradients(ev.grad_objective[i], ev.grad_measures[i])
            remaining = self.remaining

        if grads_ok and remaining > 0:
            if self.config.algorithm == "uniform-baseline":
                spec = self.domain.spec
                raw = self.baseline_rng.uniform(spec.param_lower, spec.param_upper, (self.config.batch_size, spec.n_params))
                batch = LabeledBatch(raw, np.full(len(raw), -1))
            else:
                batch = ask_all(self.emitters, self.archive)
            full = len(batch.params) <= remaining
            if not full:
                batch = LabeledBatch(batch.params[:remaining], batch.owner[:remaining])
            params, ok = self._prepare(batch.params)
            ev, rows = self._evaluate(params, ok)
            objectives, results = self._insert(params, ok, ev, rows)
            if full and self.emitters:
                # Emitters rank the solutions they asked for; repaired versions are what got archived.
                tell_all(self.emitters, LabeledBatch(batch.params, batch.owner), objectives, results, self.archive)

        self.iteration += 1
        self.stats.rows.append(
            {
                "iteration": self.iteration,
                "evals": self.stats.evaluations,
                "qd_score": self.archive.qd_score(),
                "coverage": self.archive.coverage(),
                "best_objective": self.archive.best_objective(),
            }
        )

    def run(self) -> tuple[GridArchive, RunStats]:
        start = time.perf_counter()
        while not self.done():
            self.step()
            if self.iteration % 100 == 0:
                row = self.stats.rows[-1]
                log.debug("iter %d evals %d qd %.4g cov %.3f", row["iteration"], row["evals"], row["qd_score"], row["coverage"])
        self.stats.wall_clock += time.perf_counter() - start
        return self.archive, self.stats


def run(config: ExperimentConfig, domain: Domain | None = None) -> tuple[GridArchive, RunStats]:
    return Search(config, domain).run()
