"""Minimal-edit repair of teleop scenarios.

Goal positions are projected to the nearest layout (squared L2) that lies in
the unit square with every pair at least ``min_separation`` apart. Human
parameters are clamped to their ranges and do not count toward the edit.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .teleop import N_GOALS, N_PARAMS, Scenario, TeleopConstants

MAX_SWEEPS = 50
_SPLIT_AXIS = np.array([1.0, 0.0])


class RepairError(RuntimeError):
    pass


def repair_goals(goals: np.ndarray, min_separation: float, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    g = np.clip(np.array(goals, dtype=float), 0.0, 1.0)
    for _ in range(max_sweeps):
        moved = False
        for i, j in combinations(range(len(g)), 2):
            diff = g[j] - g[i]
            dist = float(np.linalg.norm(diff))
            if dist >= min_separation - 1e-12:
                continue
            u = _SPLIT_AXIS if dist < 1e-12 else diff / dist
            shift = (min_separation - dist) / 2.0
            g[i] -= shift * u
            g[j] += shift * u
            moved = True
        g = np.clip(g, 0.0, 1.0)
        if not moved:
            return g
    if _separated(g, min_separation):
        return g
    raise RepairError(f"separation repair did not converge in {max_sweeps} sweeps")


def _separated(g: np.ndarray, min_separation: float) -> bool:
    return all(np.linalg.norm(g[i] - g[j]) >= min_separation - 1e-9 for i, j in combinations(range(len(g)), 2))


def repair(scenario: Scenario, constants: TeleopConstants = TeleopConstants()) -> tuple[Scenario, float]:
    """Return the repaired scenario and its squared L2 edit distance over goal positions."""
    goals = repair_goals(scenario.goals, constants.min_separation)
    fixed = Scenario(
        goals=goals,
        human_noise=float(np.clip(scenario.human_noise, 0.0, constants.noise_max)),
        human_rationality=float(np.clip(scenario.human_rationality, 0.0, constants.rationality_max)),
        true_goal=int(np.clip(scenario.true_goal, 0, N_GOALS - 1)),
    )
    return fixed, float(np.sum((goals - np.asarray(scenario.goals, dtype=float)) ** 2))


def repair_params(
    params: np.ndarray, constants: TeleopConstants = TeleopConstants()
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch repair on raw parameter vectors.

    Returns (repaired params, edit distances, ok mask). Rows whose repair fails
    are returned unchanged with ``ok`` False so callers can discard them.
    """
    x = np.atleast_2d(np.array(params, dtype=float))
    if x.shape[1] != N_PARAMS:
        raise ValueError(f"expected {N_PARAMS} parameters, got {x.shape[1]}")
    out = x.copy()
    dist = np.zeros(len(x))
    ok = np.ones(len(x), dtype=bool)
    for r, row in enumerate(x):
        goals = row[: 2 * N_GOALS].reshape(N_GOALS, 2)
        try:
            fixed = repair_goals(goals, constants.min_separation)
        except RepairError:
            ok[r] = False
            continue
        out[r, : 2 * N_GOALS] = fixed.reshape(-1)
        dist[r] = float(np.sum((fixed - goals) ** 2))
    out[:, 6] = np.clip(out[:, 6], 0.0, constants.noise_max)
    out[:, 7] = np.clip(out[:, 7], 0.0, constants.rationality_max)
    # The true-goal parameter is floored, so keep it strictly below N_GOALS.
    out[:, 8] = np.clip(out[:, 8], 0.0, np.nextafter(float(N_GOALS), 0.0))
    return out, dist, ok
