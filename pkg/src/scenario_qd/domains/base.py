from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    name: str
    n_params: int
    param_lower: tuple[float, ...]
    param_upper: tuple[float, ...]
    measure_names: tuple[str, ...]
    measure_lower: tuple[float, ...]
    measure_upper: tuple[float, ...]
    default_sigma: float
    gradients: bool = False
    needs_repair: bool = False
    objective_note: str = "non-negative"

    def __post_init__(self):
        if self.n_params < 1:
            raise ValueError("n_params must be >= 1")
        if len(self.param_lower) != self.n_params or len(self.param_upper) != self.n_params:
            raise ValueError("parameter box does not match n_params")
        k = len(self.measure_names)
        if len(self.measure_lower) != k or len(self.measure_upper) != k:
            raise ValueError("measure bounds do not match measure names")
        if not (np.all(np.isfinite(self.measure_lower)) and np.all(np.isfinite(self.measure_upper))):
            raise ValueError("measure bounds must be finite")

    @property
    def n_measures(self) -> int:
        return len(self.measure_names)

    @property
    def start(self) -> np.ndarray:
        """Midpoint of the parameter box; the initial search point."""
        return (np.array(self.param_lower) + np.array(self.param_upper)) / 2.0


@dataclass
class EvalResult:
    objective: float
    measures: np.ndarray
    occupancy: np.ndarray | None = None
    trajectory: np.ndarray | None = None
    seeds: tuple[int, ...] = ()
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass
class EvalBatch:
    """Vectorized evaluation output for ``b`` parameter vectors."""

    objective: np.ndarray  # (b,)
    measures: np.ndarray  # (b, k)
    occupancy: np.ndarray | None = None  # (b, cells)
    grad_objective: np.ndarray | None = None  # (b, n)
    grad_measures: np.ndarray | None = None  # (b, k, n)

    def __len__(self) -> int:
        return len(self.objective)


class Domain:
    """Evaluation environment: parameters in, objective and measures out."""

    spec: DomainSpec

    def evaluate(self, params: np.ndarray) -> EvalBatch:
        raise NotImplementedError

    def evaluate_with_gradients(self, params: np.ndarray) -> EvalBatch:
        raise TypeError(f"domain {self.spec.name!r} does not provide gradients")

    def repair(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (repaired params, edit distances, success mask). Identity by default."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        return params.copy(), np.zeros(len(params)), np.ones(len(params), dtype=bool)

    def constants(self) -> dict[str, Any]:
        return {}
