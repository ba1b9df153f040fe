"""Minimal CMA-ES engine with caller-supplied ranking.

The engine never sees objective values: ``update`` takes the last sampled
batch already ordered best-first, so the same code serves plain objective
ranking and archive-improvement ranking. Parameter defaults follow Hansen's
CMA-ES tutorial (log-linear positive weights, CSA, rank-one plus rank-mu).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

SIGMA_MIN = 1e-12
CONDITION_MAX = 1e14


def default_popsize(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


@dataclass(frozen=True)
class CmaParams:
    """Static strategy parameters derived from dimension and population size."""

    dim: int
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @classmethod
    def create(cls, dim: int, lam: int | None = None) -> CmaParams:
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        lam = default_popsize(dim) if lam is None else int(lam)
        if lam < 2:
            raise ValueError(f"population size must be >= 2, got {lam}")
        mu = lam // 2
        raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mueff = 1.0 / float(np.sum(weights**2))
        n = dim
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        return cls(dim, lam, mu, weights, mueff, cc, cs, c1, cmu, damps, chi_n)


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_c: np.ndarray
    params: CmaParams
    iteration: int = 0
    # Eigendecomposition cache of ``cov``: cov = B diag(d**2) B^T.
    basis: np.ndarray = field(default=None, repr=False)
    scales: np.ndarray = field(default=None, repr=False)
    needs_restart: bool = False

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def lam(self) -> int:
        return self.params.lam

    @property
    def weights(self) -> np.ndarray:
        return self.params.weights

    def copy(self) -> CmaState:
        return replace(
            self,
            mean=self.mean.copy(),
            cov=self.cov.copy(),
            path_sigma=self.path_sigma.copy(),
            path_c=self.path_c.copy(),
            basis=None if self.basis is None else self.basis.copy(),
            scales=None if self.scales is None else self.scales.copy(),
        )

    def condition_number(self) -> float:
        if self.scales is not None:
            return float((self.scales.max() / self.scales.min()) ** 2)
        evals = np.linalg.eigvalsh(self.cov)
        if evals[0] <= 0:
            return math.inf
        return float(evals[-1] / evals[0])


def init(mean0: Sequence[float], sigma0: float, lam: int | None = None) -> CmaState:
    mean = np.array(mean0, dtype=float).reshape(-1)
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    params = CmaParams.create(len(mean), lam)
    d = params.dim
    state = CmaState(
        mean=mean,
        sigma=float(sigma0),
        cov=np.eye(d),
        path_sigma=np.zeros(d),
        path_c=np.zeros(d),
        params=params,
    )
    _factorize(state)
    return state


def _factorize(state: CmaState) -> bool:
    """Refresh the eigen cache; regularize once on failure, else flag a restart."""
    for attempt in range(2):
        try:
            evals, basis = np.linalg.eigh(state.cov)
            if np.all(np.isfinite(evals)) and evals[0] > 0:
                state.basis = basis
                state.scales = np.sqrt(evals)
                return True
        except np.linalg.LinAlgError:
            pass
        if attempt == 0:
            d = state.dim
            state.cov = state.cov + 1e-12 * np.trace(state.cov) / d * np.eye(d)
    state.needs_restart = True
    return False


def sample(state: CmaState, rng: np.random.Generator, lam: int | None = None) -> np.ndarray:
    """Draw ``lam`` (default: state's population) points from N(mean, sigma^2 C)."""
    lam = state.lam if lam is None else lam
    if state.basis is None and not _factorize(state):
        return np.repeat(state.mean[None, :], lam, axis=0)
    z = rng.standard_normal((lam, state.dim))
    y = (z * state.scales) @ state.basis.T
    return state.mean + state.sigma * y


def _rank_weights(params: CmaParams, values: Sequence[float] | None) -> np.ndarray:
    w = params.weights
    if values is None:
        return w
    # Tied values share the average of the (zero-padded) weights over their ranks.
    full = np.zeros(params.lam)
    full[: params.mu] = w
    vals = np.asarray(values, dtype=float)
    out = full.copy()
    start = 0
    while start < len(vals):
        end = start + 1
        while end < len(vals) and vals[end] == vals[start]:
            end += 1
        out[start:end] = full[start:end].mean()
        start = end
    return out


def _canonical_ties(ranked: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sort rows lexicographically inside each run of tied values.

    Tied rows get equal weight, so this only fixes the floating-point
    summation order and makes the update exactly order-invariant.
    """
    out = ranked.copy()
    start = 0
    while start < len(values):
        end = start + 1
        while end < len(values) and values[end] == values[start]:
            end += 1
        if end - start > 1:
            block = out[start:end]
            out[start:end] = block[np.lexsort(block.T[::-1])]
        start = end
    return out


def update(state: CmaState, ranked: np.ndarray, values: Sequence[float] | None = None) -> CmaState:
    """One CMA-ES generation step from a best-first ordered batch.

    ``values`` optionally gives the ranking scores (best-first) so that tied
    ranks share their recombination weight; without it, order alone decides.
    Returns a new state; the input state is left untouched.
    """
    ranked = np.asarray(ranked, dtype=float)
    p = state.params
    if ranked.shape != (p.lam, p.dim):
        raise ValueError(f"expected ranked batch of shape {(p.lam, p.dim)}, got {ranked.shape}")
    if values is not None and len(values) != p.lam:
        raise ValueError("values must match the ranked batch length")

    if values is not None:
        ranked = _canonical_ties(ranked, np.asarray(values, dtype=float))

    new = state.copy()
    if new.basis is None:
        _factorize(new)
    w = _rank_weights(p, values)
    if values is None:
        sel = ranked[: p.mu]
        wsel = w
    else:
        nz = w > 0
        sel = ranked[nz]
        wsel = w[nz]

    old_mean = state.mean
    y = (sel - old_mean) / state.sigma
    y_w = wsel @ y
    new.mean = old_mean + state.sigma * y_w

    inv_sqrt = new.basis @ np.diag(1.0 / new.scales) @ new.basis.T
    new.path_sigma = (1 - p.cs) * state.path_sigma + math.sqrt(p.cs * (2 - p.cs) * p.mueff) * (inv_sqrt @ y_w)
    gen = state.iteration + 1
    ps_norm = float(np.linalg.norm(new.path_sigma))
    hsig = ps_norm / math.sqrt(1 - (1 - p.cs) ** (2 * gen)) / p.chi_n < 1.4 + 2 / (p.dim + 1)
    new.path_c = (1 - p.cc) * state.path_c + hsig * math.sqrt(p.cc * (2 - p.cc) * p.mueff) * y_w

    rank_one = np.outer(new.path_c, new.path_c)
    rank_mu = (y.T * wsel) @ y
    delta_hsig = (1 - hsig) * p.cc * (2 - p.cc)
    cov = (1 - p.c1 - p.cmu) * state.cov + p.c1 * (rank_one + delta_hsig * state.cov) + p.cmu * rank_mu
    new.cov = (cov + cov.T) / 2.0

    new.sigma = state.sigma * math.exp((p.cs / p.damps) * (ps_norm / p.chi_n - 1))
    new.iteration = gen
    new.basis = None
    new.scales = None
    _factorize(new)
    return new


def should_restart(state: CmaState, recent_improvements: Sequence[float]) -> bool:
    if state.needs_restart:
        return True
    if len(recent_improvements) > 0 and all(d <= 0 for d in recent_improvements):
        return True
    if not state.sigma >= SIGMA_MIN:
        return True
    return state.condition_number() > CONDITION_MAX
