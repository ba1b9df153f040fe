"""Solution generators: Gaussian mutation, improvement-ranked CMA, gradient arborescence.

Every emitter follows an ask/tell cycle. ``tell`` receives, per asked
solution, the archive improvement and add status computed by the caller, so
the same emitter runs against elitist (CMA-ME/CMA-MEGA) and soft
(CMA-MAE/CMA-MAEGA) archives unchanged.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import cma_es
from .archive import GridArchive


def rank_by_improvement(improvements: Sequence[float], objectives: Sequence[float]) -> np.ndarray:
    """Indices best-first: improvement descending, then objective descending, then position."""
    imp = np.asarray(improvements, dtype=float)
    obj = np.asarray(objectives, dtype=float)
    if imp.shape != obj.shape:
        raise ValueError("improvements and objectives must have the same length")
    # lexsort sorts by the last key first and is stable.
    return np.lexsort((-obj, -imp))


class GaussianEmitter:
    """Isotropic Gaussian perturbation of uniformly chosen elites."""

    def __init__(
        self,
        x0: Sequence[float],
        sigma: float,
        batch_size: int,
        rng: np.random.Generator,
        init_sigma: float | None = None,
    ):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.x0 = np.asarray(x0, dtype=float)
        self.sigma = float(sigma)
        self.init_sigma = self.sigma if init_sigma is None else float(init_sigma)
        self.batch_size = int(batch_size)
        self.rng = rng

    def ask(self, archive: GridArchive) -> np.ndarray:
        n = len(self.x0)
        if archive.empty:
            parents = np.repeat(self.x0[None, :], self.batch_size, axis=0)
            scale = self.init_sigma
        else:
            parents = np.stack([e.params for e in archive.sample_elites(self.batch_size, self.rng)])
            scale = self.sigma
        return parents + scale * self.rng.standard_normal((self.batch_size, n))

    def tell(self, solutions, objectives, improvements, statuses, archive) -> None:
        if len(solutions) != len(improvements):
            raise ValueError("one improvement value per solution is required")


class ImprovementEmitter:
    """CMA-ES over solution space ranked by archive improvement."""

    def __init__(
        self,
        x0: Sequence[float],
        sigma0: float,
        batch_size: int,
        rng: np.random.Generator,
    ):
        self.x0 = np.asarray(x0, dtype=float)
        self.sigma0 = float(sigma0)
        self.batch_size = int(batch_size)
        self.rng = rng
        self.cma = cma_es.init(self.x0, self.sigma0, self.batch_size)
        self.restarts = 0
        self._last: np.ndarray | None = None

    def ask(self, archive: GridArchive | None = None) -> np.ndarray:
        self._last = cma_es.sample(self.cma, self.rng)
        return self._last

    def tell(self, solutions, objectives, improvements, statuses, archive: GridArchive) -> None:
        solutions = np.asarray(solutions, dtype=float)
        if len(solutions) != self.batch_size or len(improvements) != len(solutions) or len(objectives) != len(solutions):
            raise ValueError(
                f"tell expects {self.batch_size} solutions with one objective and improvement each"
            )
        order = rank_by_improvement(improvements, objectives)
        self.cma = cma_es.update(self.cma, solutions[order])
        if cma_es.should_restart(self.cma, improvements):
            self._restart(archive)

    def _restart(self, archive: GridArchive) -> None:
        if archive is None or archive.empty:
            mean = self.x0
        else:
            mean = archive.sample_elites(1, self.rng)[0].params
        self.cma = cma_es.init(mean, self.sigma0, self.batch_size)
        self.restarts += 1


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.zeros_like(v)


def arborescence(anchor, grad_objective, grad_measures, coefficients) -> np.ndarray:
    """Branch solutions from an anchor along normalized objective and measure gradients.

    theta' = theta + |c0| * grad_f + sum_i c_i * grad_m_i, with each gradient
    scaled to unit length first (zero gradients stay zero).
    """
    anchor = np.asarray(anchor, dtype=float)
    gf = np.asarray(grad_objective, dtype=float)
    gm = np.atleast_2d(np.asarray(grad_measures, dtype=float))
    c = np.atleast_2d(np.asarray(coefficients, dtype=float))
    n = len(anchor)
    if gf.shape != (n,) or gm.shape[1] != n:
        raise ValueError(f"gradients must have {n} columns; got {gf.shape} and {gm.shape}")
    if c.shape[1] != 1 + len(gm):
        raise ValueError(f"expected {1 + len(gm)} coefficients per branch, got {c.shape[1]}")
    basis = np.vstack([_unit(gf)] + [_unit(g) for g in gm])
    c = c.copy()
    c[:, 0] = np.abs(c[:, 0])
    return anchor + c @ basis


class GradientEmitter:
    """Gradient arborescence: CMA-ES over gradient coefficients around a moving anchor.

    Each iteration the caller evaluates ``anchor`` with gradients, hands them
    over through ``set_gradients``, then asks for branches.
    """

    def __init__(
        self,
        x0: Sequence[float],
        sigma_g: float,
        batch_size: int,
        n_measures: int,
        rng: np.random.Generator,
        step_size: float = 1.0,
    ):
        self.x0 = np.asarray(x0, dtype=float)
        self.anchor = self.x0.copy()
        self.sigma_g = float(sigma_g)
        self.batch_size = int(batch_size)
        self.n_measures = int(n_measures)
        self.step_size = float(step_size)
        self.rng = rng
        self.cma = self._fresh_cma()
        self.restarts = 0
        self._grads: tuple[np.ndarray, np.ndarray] | None = None
        self._coeffs: np.ndarray | None = None

    def _fresh_cma(self) -> cma_es.CmaState:
        return cma_es.init(np.zeros(self.n_measures + 1), self.sigma_g, self.batch_size)

    def set_gradients(self, grad_objective: np.ndarray, grad_measures: np.ndarray) -> None:
        gf = np.asarray(grad_objective, dtype=float)
        gm = np.asarray(grad_measures, dtype=float)
        if gf.shape != self.anchor.shape or gm.shape != (self.n_measures, len(self.anchor)):
            raise ValueError("gradient shapes do not match the anchor and measure count")
        self._grads = (gf, gm)

    def ask(self, archive: GridArchive | None = None) -> np.ndarray:
        if self._grads is None:
            raise RuntimeError("set_gradients must be called before ask")
        self._coeffs = cma_es.sample(self.cma, self.rng)
        return arborescence(self.anchor, *self._grads, self._coeffs)

    def tell(self, solutions, objectives, improvements, statuses, archive: GridArchive) -> None:
        solutions = np.asarray(solutions, dtype=float)
        if self._coeffs is None or len(solutions) != len(self._coeffs) or len(improvements) != len(solutions):
            raise ValueError("tell must receive the batch from the preceding ask, one improvement per solution")
        order = rank_by_improvement(improvements, objectives)
        self.cma = cma_es.update(self.cma, self._coeffs[order])
        best = order[0]
        if improvements[best] > 0:
            self.anchor = self.anchor + self.step_size * (solutions[best] - self.anchor)
        self._grads = None
        if cma_es.should_restart(self.cma, improvements):
            self._restart(archive)

    def _restart(self, archive: GridArchive) -> None:
        if archive is None or archive.empty:
            self.anchor = self.x0.copy()
        else:
            self.anchor = archive.sample_elites(1, self.rng)[0].params.copy()
        self.cma = self._fresh_cma()
        self.restarts += 1
