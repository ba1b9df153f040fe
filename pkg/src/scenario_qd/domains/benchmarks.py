"""Analytic benchmark domains: shifted sphere with linear projection, and a flat plateau."""

from __future__ import annotations

import math

import numpy as np

from .base import Domain, DomainSpec, EvalBatch, EvalResult

CLIP = 5.12
SPHERE_SHIFT = 0.4 * CLIP


class SphereLP(Domain):
    """Shifted sphere objective with clipped linear-projection measures.

    f = F_max - sum((x - 2.048)^2), floored at 0, where F_max is the largest
    squared distance inside the [-5.12, 5.12]^n box, so f >= 0 on the box.
    Measure 1 sums the clipped first ceil(n/2) coordinates, measure 2 the rest.
    """

    def __init__(self, dim: int = 20, sigma: float = 0.5):
        if dim < 2:
            raise ValueError("sphere-lp needs at least 2 parameters")
        self.dim = dim
        self.split = math.ceil(dim / 2)
        self.f_max = dim * (CLIP + SPHERE_SHIFT) ** 2
        rest = dim - self.split
        self.spec = DomainSpec(
            name="sphere-lp",
            n_params=dim,
            param_lower=(-CLIP,) * dim,
            param_upper=(CLIP,) * dim,
            measure_names=("clip_sum_head", "clip_sum_tail"),
            measure_lower=(-CLIP * self.split, -CLIP * rest),
            measure_upper=(CLIP * self.split, CLIP * rest),
            default_sigma=sigma,
            gradients=True,
        )

    def constants(self):
        return {"sphere.dim": self.dim, "sphere.sigma": self.spec.default_sigma, "sphere.f_max": self.f_max}

    def _check(self, params):
        x = np.atleast_2d(np.asarray(params, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} parameters, got {x.shape[1]}")
        return x

    def evaluate(self, params: np.ndarray) -> EvalBatch:
        return self._evaluate(self._check(params), grads=False)

    def evaluate_with_gradients(self, params: np.ndarray) -> EvalBatch:
        return self._evaluate(self._check(params), grads=True)

    def _evaluate(self, x: np.ndarray, grads: bool) -> EvalBatch:
        raw = self.f_max - np.sum((x - SPHERE_SHIFT) ** 2, axis=1)
        f = np.maximum(raw, 0.0)
        clipped = np.clip(x, -CLIP, CLIP)
        m = np.stack([clipped[:, : self.split].sum(1), clipped[:, self.split :].sum(1)], axis=1)
        out = EvalBatch(objective=f, measures=m)
        if grads:
            gf = -2.0 * (x - SPHERE_SHIFT)
            gf[raw <= 0] = 0.0
            inside = (np.abs(x) < CLIP).astype(float)
            gm = np.zeros((len(x), 2, self.dim))
            gm[:, 0, : self.split] = inside[:, : self.split]
            gm[:, 1, self.split :] = inside[:, self.split :]
            out.grad_objective = gf
            out.grad_measures = gm
        return out

    def evaluate_one(self, theta) -> EvalResult:
        b = self.evaluate_with_gradients(theta)
        return EvalResult(
            objective=float(b.objective[0]),
            measures=b.measures[0],
            extras={"grad_objective": b.grad_objective[0], "grad_measures": b.grad_measures[0]},
        )


class Plateau(Domain):
    """Objective identically 1; measures are the first two coordinates, clipped."""

    def __init__(self, dim: int = 20, bound: float = 20.48, sigma: float = 0.5):
        if dim < 2:
            raise ValueError("plateau needs at least 2 parameters")
        self.dim = dim
        self.bound = bound
        self.spec = DomainSpec(
            name="plateau",
            n_params=dim,
            param_lower=(-bound,) * dim,
            param_upper=(bound,) * dim,
            measure_names=("x0", "x1"),
            measure_lower=(-bound, -bound),
            measure_upper=(bound, bound),
            default_sigma=sigma,
        )

    def constants(self):
        return {"plateau.dim": self.dim, "plateau.bound": self.bound, "plateau.sigma": self.spec.default_sigma}

    def evaluate(self, params: np.ndarray) -> EvalBatch:
        x = np.atleast_2d(np.asarray(params, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} parameters, got {x.shape[1]}")
        m = np.clip(x[:, :2], -self.bound, self.bound)
        return EvalBatch(objective=np.ones(len(x)), measures=m)


def sphere_lp_evaluate(theta, domain: SphereLP | None = None) -> EvalResult:
    theta = np.asarray(theta, dtype=float)
    domain = domain or SphereLP(dim=len(theta))
    return domain.evaluate_one(theta)


def plateau_evaluate(theta, domain: Plateau | None = None) -> EvalResult:
    theta = np.asarray(theta, dtype=float)
    domain = domain or Plateau(dim=len(theta))
    b = domain.evaluate(theta)
    return EvalResult(objective=float(b.objective[0]), measures=b.measures[0])
