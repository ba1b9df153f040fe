"""Surrogate-assisted scenario search.

A small tanh network predicts objective, measures and an occupancy grid from
scenario parameters. An inner QD loop fills a throwaway surrogate archive from
its predictions; the outer loop samples that archive, labels the samples with
the real simulator, retrains, and starts the next inner loop from scratch.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .archive import GridArchive, Solution
from .domains import Domain, EvalBatch
from .scheduler import ExperimentConfig, RunStats, Search, emitter_streams

log = logging.getLogger(__name__)

ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # (f(z), f'(z) expressed through a = f(z))
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


class SurrogateNet:
    """Two hidden layers, an occupancy head, and a prediction head.

    The prediction head reads the second hidden layer concatenated with the
    occupancy head's output (ReLU, so occupancy stays non-negative).
    Parameters live in ``self.params`` as a name -> array dict.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        hidden: tuple[int, ...] = (64, 64),
        occupancy_cells: int = 64,
        use_occupancy: bool = True,
        activation: str = "tanh",
        seed: int = 0,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.hidden = tuple(hidden)
        self.occupancy_cells = occupancy_cells
        self.use_occupancy = use_occupancy
        self.activation = activation
        rng = np.random.default_rng(seed)
        h1, h2 = self.hidden
        head_in = h2 + (occupancy_cells if use_occupancy else 0)
        self.params: dict[str, np.ndarray] = {
            "W1": _glorot(rng, h1, n_in),
            "b1": np.zeros(h1),
            "W2": _glorot(rng, h2, h1),
            "b2": np.zeros(h2),
            "Wp": _glorot(rng, n_out, head_in),
            "bp": np.zeros(n_out),
        }
        if use_occupancy:
            self.params["Wo"] = _glorot(rng, occupancy_cells, h2)
            self.params["bo"] = np.zeros(occupancy_cells)

    def copy(self) -> SurrogateNet:
        new = object.__new__(SurrogateNet)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        """(B, n_in) -> prediction (B, n_out), occupancy (B, cells), cache for backward."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_in:
            raise ValueError(f"expected {self.n_in} inputs, got {x.shape[1]}")
        act, _ = ACTIVATIONS[self.activation]
        p = self.params
        a1 = act(x @ p["W1"].T + p["b1"])
        a2 = act(a1 @ p["W2"].T + p["b2"])
        if self.use_occupancy:
            zo = a2 @ p["Wo"].T + p["bo"]
            occ = np.maximum(zo, 0.0)
            head = np.concatenate([a2, occ], axis=1)
        else:
            zo = None
            occ = np.zeros((len(x), self.occupancy_cells))
            head = a2
        pred = head @ p["Wp"].T + p["bp"]
        cache = {"x": x, "a1": a1, "a2": a2, "zo": zo, "head": head}
        return pred, occ, cache

    def backward(self, cache: dict, grad_pred: np.ndarray, grad_occ: np.ndarray | None = None) -> tuple[dict, np.ndarray]:
        """Reverse-mode pass. Returns (parameter gradients, input gradient (B, n_in))."""
        _, dact = ACTIVATIONS[self.activation]
        p = self.params
        gp = np.atleast_2d(grad_pred)
        g: dict[str, np.ndarray] = {}
        g["Wp"] = gp.T @ cache["head"]
        g["bp"] = gp.sum(axis=0)
        ghead = gp @ p["Wp"]
        h2 = self.hidden[1]
        ga2 = ghead[:, :h2].copy()
        if self.use_occupancy:
            gocc = ghead[:, h2:]
            if grad_occ is not None:
                gocc = gocc + grad_occ
            gzo = gocc * (cache["zo"] > 0)
            g["Wo"] = gzo.T @ cache["a2"]
            g["bo"] = gzo.sum(axis=0)
            ga2 += gzo @ p["Wo"]
        gz2 = ga2 * dact(cache["a2"])
        g["W2"] = gz2.T @ cache["a1"]
        g["b2"] = gz2.sum(axis=0)
        gz1 = (gz2 @ p["W2"]) * dact(cache["a1"])
        g["W1"] = gz1.T @ cache["x"]
        g["b1"] = gz1.sum(axis=0)
        gx = gz1 @ p["W1"]
        return g, gx

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d prediction / d input, shape (B, n_out, n_in)."""
        _, _, cache = self.forward(x)
        B = len(cache["x"])
        jac = np.empty((B, self.n_out, self.n_in))
        for j in range(self.n_out):
            gp = np.zeros((B, self.n_out))
            gp[:, j] = 1.0
            _, gx = self.backward(cache, gp)
            jac[:, j, :] = gx
        return jac

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Flat text tensor list: a ``name d0 d1 ...`` header line, then the values."""
        lines = [f"surrogate-net {self.n_in} {self.n_out} {' '.join(map(str, self.hidden))} "
                 f"{self.occupancy_cells} {int(self.use_occupancy)} {self.activation}"]  # fmt: skip
        for name in sorted(self.params):
            arr = self.params[name]
            lines.append(f"{name} {' '.join(map(str, arr.shape))}")
            lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SurrogateNet:
        lines = Path(path).read_text().splitlines()
        head = lines[0].split()
        n_in, n_out, h1, h2, cells, use_occ, activation = head[1:]
        net = cls(int(n_in), int(n_out), (int(h1), int(h2)), int(cells), bool(int(use_occ)), activation)
        for i in range(1, len(lines), 2):
            name, *shape = lines[i].split()
            values = np.array([float(v) for v in lines[i + 1].split()]) if lines[i + 1] else np.zeros(0)
            net.params[name] = values.reshape(tuple(int(s) for s in shape))
        return net


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def forward(net: SurrogateNet, params) -> tuple[float, np.ndarray, np.ndarray]:
    """Single-input convenience: (objective, measures, occupancy) in network units."""
    pred, occ, _ = net.forward(np.asarray(params, dtype=float)[None, :])
    return float(pred[0, 0]), pred[0, 1:], occ[0]


def backward(net: SurrogateNet, params, grad_pred, grad_occ=None) -> tuple[dict, np.ndarray]:
    _, _, cache = net.forward(np.atleast_2d(np.asarray(params, dtype=float)))
    return net.backward(cache, np.atleast_2d(grad_pred), None if grad_occ is None else np.atleast_2d(grad_occ))


# -- data -------------------------------------------------------------------


class Dataset:
    """Append-only ground-truth rows keyed by their parameter bytes."""

    def __init__(self, n_params: int, n_measures: int, occupancy_cells: int = 64):
        self.n_params = n_params
        self.n_measures = n_measures
        self.occupancy_cells = occupancy_cells
        self.params = np.zeros((0, n_params))
        self.objective = np.zeros(0)
        self.measures = np.zeros((0, n_measures))
        self.occupancy = np.zeros((0, occupancy_cells))
        self._keys: set[bytes] = set()

    def __len__(self) -> int:
        return len(self.objective)

    def append(self, params: np.ndarray, batch: EvalBatch) -> int:
        """Add rows not already present; returns how many were added."""
        params = np.atleast_2d(params)
        occ = batch.occupancy if batch.occupancy is not None else np.zeros((len(params), self.occupancy_cells))
        keep = []
        for i, row in enumerate(params):
            key = np.ascontiguousarray(row, dtype="<f8").tobytes()
            if key in self._keys:
                continue
            self._keys.add(key)
            keep.append(i)
        if keep:
            self.params = np.vstack([self.params, params[keep]])
            self.objective = np.concatenate([self.objective, batch.objective[keep]])
            self.measures = np.vstack([self.measures, batch.measures[keep]])
            self.occupancy = np.vstack([self.occupancy, occ[keep]])
        return len(keep)

    def targets(self) -> np.ndarray:
        return np.column_stack([self.objective, self.measures])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            [f"param_{i}" for i in range(self.n_params)]
            + ["objective"]
            + [f"measure_{i}" for i in range(self.n_measures)]
            + [f"occupancy_{i}" for i in range(self.occupancy_cells)]
        )
        for i in range(len(self)):
            vals = list(self.params[i]) + [self.objective[i]] + list(self.measures[i]) + list(self.occupancy[i])
            w.writerow([repr(float(v)) for v in vals])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path, n_params: int, n_measures: int, occupancy_cells: int = 64) -> Dataset:
        ds = cls(n_params, n_measures, occupancy_cells)
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.size:
            p, k = n_params, n_measures
            batch = EvalBatch(rows[:, p], rows[:, p + 1 : p + 1 + k], rows[:, p + 1 + k :])
            ds.append(rows[:, :p], batch)
        return ds


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    occupancy_weight: float = 1.0
    seed: int = 0


@dataclass
class Standardizer:
    """Per-column affine maps frozen from the dataset at each retraining."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    occ_scale: float

    @classmethod
    def fit(cls, ds: Dataset) -> Standardizer:
        def safe_std(a):
            s = a.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        y = ds.targets()
        row_sums = ds.occupancy.sum(axis=1)
        occ_scale = float(row_sums.mean()) if len(row_sums) and row_sums.mean() > 0 else 1.0
        return cls(ds.params.mean(0), safe_std(ds.params), y.mean(0), safe_std(y), occ_scale)


def train(net: SurrogateNet, dataset: Dataset, config: TrainConfig = TrainConfig(), scaler: Standardizer | None = None) -> list[float]:
    """Momentum SGD on MSE(prediction) + occupancy_weight * MSE(occupancy).

    Trains ``net`` in place and returns the mean loss of each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    scaler = scaler or Standardizer.fit(dataset)
    x = (dataset.params - scaler.x_mean) / scaler.x_std
    y = (dataset.targets() - scaler.y_mean) / scaler.y_std
    occ = dataset.occupancy / scaler.occ_scale
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    trace = []
    n = len(x)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _loss_and_grads(net, x[idx], y[idx], occ[idx], config.occupancy_weight)
            total += loss * len(idx)
            for k, gk in grads.items():
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * gk
                net.params[k] += velocity[k]
        trace.append(total / n)
    return trace


def _loss_and_grads(net, x, y, occ, occ_weight):
    pred, occ_hat, cache = net.forward(x)
    rp = pred - y
    loss = float(np.mean(rp**2))
    gpred = 2.0 * rp / rp.size
    gocc = None
    if net.use_occupancy and occ_weight > 0:
        ro = occ_hat - occ
        loss += occ_weight * float(np.mean(ro**2))
        gocc = occ_weight * 2.0 * ro / ro.size
    grads, _ = net.backward(cache, gpred, gocc)
    return loss, grads


def dataset_loss(net: SurrogateNet, dataset: Dataset, scaler: Standardizer, occupancy_weight: float = 1.0) -> float:
    x = (dataset.params - scaler.x_mean) / scaler.x_std
    y = (dataset.targets() - scaler.y_mean) / scaler.y_std
    occ = dataset.occupancy / scaler.occ_scale
    loss, _ = _loss_and_grads(net, x, y, occ, occupancy_weight)
    return loss


class SurrogateDomain(Domain):
    """Presents a trained net as a gradient-capable domain in physical units."""

    def __init__(self, base: Domain, net: SurrogateNet, scaler: Standardizer):
        self.base = base
        self.net = net
        self.scaler = scaler
        self.spec = replace(base.spec, name=f"surrogate[{base.spec.name}]", gradients=True)

    def repair(self, params):
        return self.base.repair(params)

    def _predict(self, params):
        x = np.atleast_2d(np.asarray(params, dtype=float))
        s = self.scaler
        pred, occ, _ = self.net.forward((x - s.x_mean) / s.x_std)
        y = pred * s.y_std + s.y_mean
        # Objectives must stay non-negative for the archive.
        return x, np.maximum(y[:, 0], 0.0), y[:, 1:], occ * s.occ_scale

    def evaluate(self, params: np.ndarray) -> EvalBatch:
        _, f, m, occ = self._predict(params)
        return EvalBatch(f, m, occ)

    def evaluate_with_gradients(self, params: np.ndarray) -> EvalBatch:
        x, f, m, occ = self._predict(params)
        s = self.scaler
        jac = self.net.input_jacobian((x - s.x_mean) / s.x_std)
        jac = jac * s.y_std[None, :, None] / s.x_std[None, None, :]
        gf = np.where((f > 0)[:, None], jac[:, 0, :], 0.0)
        return EvalBatch(f, m, occ, grad_objective=gf, grad_measures=jac[:, 1:, :])


def downsample(archive: GridArchive, size: int, rng: np.random.Generator) -> list[Solution]:
    """Uniform sample without replacement over occupied cells (all of them if fewer)."""
    if size < 1:
        raise ValueError("downsample size must be >= 1")
    elites = archive.elites()
    if len(elites) <= size:
        return elites
    picks = rng.choice(len(elites), size=size, replace=False)
    return [elites[i] for i in sorted(picks)]


@dataclass(frozen=True)
class DsageConfig:
    outer_iterations: int = 100
    budget: int = 2500
    bootstrap: int = 100
    inner_budget: int = 10_000
    downsample_size: int = 100
    inner_algorithm: str = "cma-mae"
    inner_emitters: int = 3
    inner_batch_size: int = 12
    learning_rate: float = 0.1
    resolution: tuple[int, ...] = (25, 25)
    train: TrainConfig = field(default_factory=TrainConfig)
    use_occupancy: bool = True
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        for name in ("budget", "bootstrap", "inner_budget", "downsample_size", "inner_emitters", "inner_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be non-negative")
        if self.inner_algorithm not in ("cma-mae", "cma-maega", "cma-me", "cma-mega", "map-elites"):
            raise ValueError(f"unsupported inner algorithm {self.inner_algorithm!r}")


@dataclass
class DsageStats(RunStats):
    dataset_sizes: list[int] = field(default_factory=list)
    surrogate_coverage_at_start: list[float] = field(default_factory=list)
    surrogate_evaluations: int = 0
    train_losses: list[float] = field(default_factory=list)


def dsage_run(config: DsageConfig, domain: Domain) -> tuple[GridArchive, DsageStats]:
    """Alternate surrogate exploitation with ground-truth labeling and retraining."""
    spec = domain.spec
    gt_config = ExperimentConfig(
        algorithm="cma-mae",
        domain=spec.name,
        resolution=config.resolution,
        learning_rate=config.learning_rate,
    ).archive_config(domain)
    gt_archive = GridArchive(gt_config)
    surrogate_archive = GridArchive(gt_config)
    stats = DsageStats()
    if config.outer_iterations == 0:
        return gt_archive, stats

    sample_rng, boot_rng, *_ = emitter_streams(config.seed, 2)
    occupancy_cells = _occupancy_cells(domain)
    dataset = Dataset(spec.n_params, spec.n_measures, occupancy_cells)
    net = SurrogateNet(
        spec.n_params, 1 + spec.n_measures, config.hidden, occupancy_cells, config.use_occupancy, seed=config.seed
    )

    def label(params: np.ndarray) -> None:
        params = params[: max(0, config.budget - stats.evaluations)]
        if not len(params):
            return
        if spec.needs_repair:
            params, _, ok = domain.repair(params)
            stats.discarded += int((~ok).sum())
            params = params[ok]
        ev = domain.evaluate(params)
        stats.evaluations += len(params)
        for i in range(len(params)):
            occ = None if ev.occupancy is None else ev.occupancy[i]
            gt_archive.add(Solution(params[i], ev.objective[i], ev.measures[i], {"occupancy": occ}))
        dataset.append(params, ev)

    label(boot_rng.uniform(spec.param_lower, spec.param_upper, (config.bootstrap, spec.n_params)))

    for outer in range(config.outer_iterations):
        if stats.evaluations >= config.budget:
            break
        scaler = Standardizer.fit(dataset)
        train_cfg = replace(config.train, seed=config.seed * 100_003 + outer)
        stats.train_losses.extend(train(net, dataset, train_cfg, scaler))

        surrogate_archive.reset()
        stats.surrogate_coverage_at_start.append(surrogate_archive.coverage())
        inner = ExperimentConfig(
            algorithm=config.inner_algorithm,
            domain=spec.name,
            resolution=config.resolution,
            learning_rate=None if config.inner_algorithm in ("cma-me", "cma-mega", "map-elites") else config.learning_rate,
            emitters=config.inner_emitters,
            batch_size=config.inner_batch_size,
            budget=config.inner_budget,
            seed=int(np.random.SeedSequence([config.seed, outer]).generate_state(1)[0]),
            sigma=spec.default_sigma,
        )
        search = Search(inner, SurrogateDomain(domain, net.copy(), scaler), archive=surrogate_archive)
        search.run()
        stats.surrogate_evaluations += search.stats.evaluations

        picked = downsample(surrogate_archive, config.downsample_size, sample_rng)
        if picked:
            label(np.stack([s.params for s in picked]))
        stats.dataset_sizes.append(len(dataset))
        stats.rows.append(
            {
                "iteration": outer + 1,
                "evals": stats.evaluations,
                "qd_score": gt_archive.qd_score(),
                "coverage": gt_archive.coverage(),
                "best_objective": gt_archive.best_objective(),
            }
        )
        log.debug("outer %d evals %d qd %.4g cov %.3f", outer, stats.evaluations, gt_archive.qd_score(), gt_archive.coverage())
    surrogate_archive.reset()
    return gt_archive, stats


def _occupancy_cells(domain: Domain) -> int:
    c = getattr(domain, "c", None)
    return c.grid * c.grid if c is not None and hasattr(c, "grid") else 64
