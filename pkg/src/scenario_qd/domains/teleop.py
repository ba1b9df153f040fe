"""Shared-control teleoperation simulator.

A simulated human steers a joystick toward one of three goal objects. The
robot keeps a Bayesian posterior over goals from the joystick directions and
drives straight to its current MAP goal. The search maximizes normalized
completion time, so high objective values are team failures.

Parameter vector layout (9 values)::

    g0x g0y g1x g1y g2x g2y human_noise human_rationality true_goal
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .base import Domain, DomainSpec, EvalBatch, EvalResult

N_GOALS = 3
N_PARAMS = 2 * N_GOALS + 3
PARAM_NAMES = (
    "g0x", "g0y", "g1x", "g1y", "g2x", "g2y",
    "human_noise", "human_rationality", "true_goal",
)  # fmt: skip


@dataclass(frozen=True)
class TeleopConstants:
    dt: float = 0.05
    horizon: int = 400
    robot_speed: float = 0.02
    success_radius: float = 0.03
    robot_beta: float = 5.0
    min_separation: float = 0.08
    start_x: float = 0.5
    start_y: float = 0.5
    noise_max: float = 0.5
    rationality_max: float = 20.0
    grid: int = 8
    trials: int = 5
    # The robot keeps its current target until another goal leads it by this log-odds margin.
    switch_margin: float = 1.0
    # A robot that reaches a wrong goal grasps it and stays there.
    commit_on_arrival: bool = True
    variation_max: float = 120.0
    distance_max: float = 1.2
    sigma: float = 0.2


@dataclass
class Scenario:
    goals: np.ndarray  # (3, 2)
    human_noise: float
    human_rationality: float
    true_goal: int

    @classmethod
    def from_params(cls, params) -> Scenario:
        p = np.asarray(params, dtype=float)
        if p.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {p.shape}")
        return cls(
            goals=p[: 2 * N_GOALS].reshape(N_GOALS, 2).copy(),
            human_noise=float(p[6]),
            human_rationality=float(p[7]),
            true_goal=int(np.floor(p[8])),
        )

    def to_params(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.goals, dtype=float).reshape(-1),
             [self.human_noise, self.human_rationality, self.true_goal + 0.5]]
        )  # fmt: skip


def validity(scenario: Scenario | np.ndarray, constants: TeleopConstants = TeleopConstants()) -> list[str]:
    """Names of violated constraints; empty means the scenario is valid."""
    s = scenario if isinstance(scenario, Scenario) else Scenario.from_params(scenario)
    problems = []
    goals = np.asarray(s.goals, dtype=float)
    for i, g in enumerate(goals):
        if np.any(g < 0.0) or np.any(g > 1.0):
            problems.append(f"containment: goal {i} at ({g[0]:.4g}, {g[1]:.4g}) outside the workspace")
    for i, j in combinations(range(N_GOALS), 2):
        d = float(np.linalg.norm(goals[i] - goals[j]))
        if d < constants.min_separation - 1e-9:
            problems.append(f"separation: goals {i} and {j} are {d:.4g} apart (< {constants.min_separation})")
    if not 0.0 <= s.human_noise <= constants.noise_max:
        problems.append(f"range: human_noise {s.human_noise:.4g} not in [0, {constants.noise_max}]")
    if not 0.0 <= s.human_rationality <= constants.rationality_max:
        problems.append(f"range: human_rationality {s.human_rationality:.4g} not in [0, {constants.rationality_max}]")
    if not 0 <= s.true_goal < N_GOALS:
        problems.append(f"range: true_goal {s.true_goal} not in [0, {N_GOALS})")
    return problems


def scenario_seeds(params: np.ndarray, trials: int) -> tuple[int, ...]:
    """Rollout seeds derived from the parameter bytes, so results are cacheable."""
    digest = hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).digest()
    ss = np.random.SeedSequence(int.from_bytes(digest[:16], "little"))
    return tuple(int(s) for s in ss.generate_state(trials, dtype=np.uint64))


def mean_pairwise_distance(goals: np.ndarray) -> np.ndarray:
    """(..., 3, 2) goal arrays -> (...,) mean pairwise distance."""
    goals = np.asarray(goals, dtype=float)
    pairs = list(combinations(range(N_GOALS), 2))
    d = [np.linalg.norm(goals[..., i, :] - goals[..., j, :], axis=-1) for i, j in pairs]
    return np.mean(d, axis=0)


@dataclass
class Rollouts:
    """Per-rollout outputs of a vectorized simulation."""

    steps: np.ndarray  # steps simulated (== horizon on timeout)
    success: np.ndarray
    variation: np.ndarray
    occupancy: np.ndarray  # (R, grid*grid)
    max_wrong_prob: np.ndarray
    trajectory: np.ndarray | None = None  # (R, steps+1, 2), only when requested
    map_goal: np.ndarray | None = None  # (R, steps) posterior argmax per step, only when requested


def simulate(
    goals: np.ndarray,
    true_goal: np.ndarray,
    noise: np.ndarray,
    rationality: np.ndarray,
    seeds: np.ndarray,
    constants: TeleopConstants = TeleopConstants(),
    record: bool = False,
) -> Rollouts:
    """Run R independent rollouts in lockstep.

    goals (R, 3, 2); true_goal, noise, rationality, seeds (R,).
    """
    c = constants
    R = len(seeds)
    T = c.horizon
    eps = np.empty((R, T))
    rand_dir = np.empty((R, T))
    rand_u = np.empty((R, T))
    for r, seed in enumerate(seeds):
        gen = np.random.Generator(np.random.PCG64(int(seed)))
        eps[r] = gen.standard_normal(T)
        rand_dir[r] = gen.uniform(-np.pi, np.pi, T)
        rand_u[r] = gen.random(T)
    eps *= noise[:, None]
    abs_eps_tail = np.cumsum(np.abs(eps)[:, ::-1], axis=1)[:, ::-1]  # sum |eps[t:]|

    rows = np.arange(R)
    pos = np.tile([c.start_x, c.start_y], (R, 1)).astype(float)
    logpost = np.full((R, N_GOALS), -np.log(N_GOALS))
    target = goals[rows, true_goal]
    running = np.linalg.norm(pos - target, axis=1) > c.success_radius
    success = ~running
    steps = np.zeros(R, dtype=int)
    variation = np.zeros(R)
    occupancy = np.zeros((R, c.grid * c.grid))
    wrong_mask = np.ones((R, N_GOALS), dtype=bool)
    wrong_mask[rows, true_goal] = False
    max_wrong = np.where(wrong_mask, 1.0 / N_GOALS, 0.0).max(axis=1)
    traj = [pos.copy()] if record else None
    maps = [] if record else None
    chosen = np.zeros(R, dtype=int)  # uniform prior: ties go to the lowest index

    for t in range(T):
        if not running.any():
            break
        act = running
        to_true = target - pos
        intended = np.arctan2(to_true[:, 1], to_true[:, 0])
        noisy = intended + eps[:, t]
        # Random direction vs goal direction, chosen by a softmax on alignment.
        p_random = 1.0 / (1.0 + np.exp(rationality * (1.0 - np.cos(rand_dir[:, t] - intended))))
        joystick = np.where(rand_u[:, t] < p_random, rand_dir[:, t], noisy)

        to_goals = goals - pos[:, None, :]
        goal_dist = np.linalg.norm(to_goals, axis=2)
        goal_ang = np.arctan2(to_goals[..., 1], to_goals[..., 0])
        align = np.where(goal_dist > 1e-12, np.cos(joystick[:, None] - goal_ang), 0.0)
        lp = logpost + c.robot_beta * align
        lp -= lp.max(axis=1, keepdims=True)
        lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
        logpost = np.where(act[:, None], lp, logpost)
        post = np.exp(logpost)
        max_wrong = np.where(act, np.maximum(max_wrong, np.where(wrong_mask, post, 0.0).max(axis=1)), max_wrong)

        best = np.argmax(logpost, axis=1)
        if record:
            maps.append(best.copy())
        lead = logpost[rows, best] - logpost[rows, chosen]
        chosen = np.where(act & (lead > c.switch_margin), best, chosen)
        delta = goals[rows, chosen] - pos
        dist = np.linalg.norm(delta, axis=1)
        step = np.minimum(c.robot_speed, dist)
        move = np.where(dist[:, None] > 0, delta / np.maximum(dist, 1e-300)[:, None] * step[:, None], 0.0)
        pos = np.where(act[:, None], pos + move, pos)

        variation += np.where(act, np.abs(eps[:, t]), 0.0)
        steps += act
        cell = _grid_cell(pos, c.grid)
        occupancy[rows[act], cell[act]] += 1.0
        if record:
            traj.append(pos.copy())

        reached = act & (np.linalg.norm(pos - target, axis=1) <= c.success_radius)
        success |= reached
        running = act & ~reached
        if c.commit_on_arrival:
            at_chosen = np.linalg.norm(goals[rows, chosen] - pos, axis=1) <= c.success_radius
            latched = running & (chosen != true_goal) & at_chosen
            if latched.any():
                # The robot sits at the wrong goal until the horizon; account for it directly.
                rest = T - (t + 1)
                if t + 1 < T:
                    variation[latched] += abs_eps_tail[latched, t + 1]
                occupancy[rows[latched], cell[latched]] += rest
                steps[latched] += rest
                running &= ~latched

    trajectory = map_goal = None
    if record:
        trajectory = np.stack(traj, axis=1)
        map_goal = np.stack(maps, axis=1) if maps else np.zeros((R, 0), dtype=int)
    return Rollouts(steps, success, variation, occupancy, max_wrong, trajectory, map_goal)


def _grid_cell(pos: np.ndarray, grid: int) -> np.ndarray:
    ij = np.clip(np.floor(pos * grid).astype(int), 0, grid - 1)
    return ij[:, 1] * grid + ij[:, 0]


class Teleop(Domain):
    def __init__(self, constants: TeleopConstants = TeleopConstants()):
        c = constants
        self.c = constants
        self.spec = DomainSpec(
            name="teleop",
            n_params=N_PARAMS,
            param_lower=(0.0,) * (2 * N_GOALS) + (0.0, 0.0, 0.0),
            param_upper=(1.0,) * (2 * N_GOALS) + (c.noise_max, c.rationality_max, float(N_GOALS)),
            measure_names=("human_variation", "mean_goal_distance"),
            measure_lower=(0.0, 0.0),
            measure_upper=(c.variation_max, c.distance_max),
            default_sigma=c.sigma,
            needs_repair=True,
        )

    def constants(self):
        return {f"teleop.{k}": v for k, v in asdict(self.c).items()}

    def repair(self, params):
        from .repair import repair_params

        return repair_params(params, self.c)

    def evaluate(self, params: np.ndarray) -> EvalBatch:
        x = np.atleast_2d(np.asarray(params, dtype=float))
        for row in x:
            problems = validity(row, self.c)
            if problems:
                raise ValueError(f"invalid scenario {row.tolist()}: " + "; ".join(problems))
        b, trials = len(x), self.c.trials
        seeds = np.array([s for row in x for s in scenario_seeds(row, trials)], dtype=np.uint64)
        res = self._rollouts(np.repeat(x, trials, axis=0), seeds)
        return EvalBatch(
            objective=res["objective"].reshape(b, trials).mean(axis=1),
            measures=np.stack(
                [res["variation"].reshape(b, trials).mean(axis=1), mean_pairwise_distance(x[:, :6].reshape(b, N_GOALS, 2))],
                axis=1,
            ),
            occupancy=res["occupancy"].reshape(b, trials, -1).mean(axis=1),
        )

    def _rollouts(self, x: np.ndarray, seeds: np.ndarray, record: bool = False) -> dict:
        ro = simulate(
            goals=x[:, :6].reshape(-1, N_GOALS, 2),
            true_goal=np.floor(x[:, 8]).astype(int),
            noise=x[:, 6],
            rationality=x[:, 7],
            seeds=seeds,
            constants=self.c,
            record=record,
        )
        objective = np.where(ro.success, ro.steps / self.c.horizon, 1.0)
        return {
            "objective": objective,
            "variation": ro.variation,
            "occupancy": ro.occupancy,
            "max_wrong_prob": ro.max_wrong_prob,
            "steps": ro.steps,
            "trajectory": ro.trajectory,
            "map_goal": ro.map_goal,
        }


def teleop_evaluate(
    scenario: Scenario | np.ndarray,
    seed_set=None,
    constants: TeleopConstants = TeleopConstants(),
    record: bool = False,
) -> EvalResult:
    """Average of seeded rollouts for one scenario.

    Without ``seed_set`` the seeds are derived from the scenario's parameters.
    """
    s = scenario if isinstance(scenario, Scenario) else Scenario.from_params(scenario)
    problems = validity(s, constants)
    if problems:
        raise ValueError("invalid scenario: " + "; ".join(problems))
    params = s.to_params() if isinstance(scenario, Scenario) else np.asarray(scenario, dtype=float)
    if seed_set is None:
        seed_set = scenario_seeds(params, constants.trials)
    seeds = np.array(seed_set, dtype=np.uint64)
    dom = Teleop(constants)
    res = dom._rollouts(np.repeat(params[None, :], len(seeds), axis=0), seeds, record=record)
    return EvalResult(
        objective=float(res["objective"].mean()),
        measures=np.array([res["variation"].mean(), float(mean_pairwise_distance(s.goals))]),
        occupancy=res["occupancy"].mean(axis=0).reshape(constants.grid, constants.grid),
        trajectory=res["trajectory"][0] if record else None,
        seeds=tuple(int(v) for v in seeds),
        extras={
            "max_wrong_prob": res["max_wrong_prob"],
            "steps": res["steps"],
            "per_trial_objective": res["objective"],
            "map_goal": res["map_goal"],
        },
    )


def trajectory_csv(trajectory: np.ndarray) -> str:
    lines = ["step,x,y"]
    lines += [f"{i},{x!r},{y!r}" for i, (x, y) in enumerate(np.asarray(trajectory, dtype=float).tolist())]
    return "\n".join(lines) + "\n"
