"""Grid archive with elitist and soft (annealed threshold) insertion."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

# Upper bounds are closed: a measure equal to ub maps to the last cell.
_UPPER_EPS = 1e-9


@dataclass(frozen=True)
class ArchiveConfig:
    lower_bounds: tuple[float, ...]
    upper_bounds: tuple[float, ...]
    resolution: tuple[int, ...]
    learning_rate: float = 1.0
    threshold_floor: float = 0.0

    def __post_init__(self):
        lb = tuple(float(v) for v in self.lower_bounds)
        ub = tuple(float(v) for v in self.upper_bounds)
        res = tuple(int(v) for v in self.resolution)
        if not (len(lb) == len(ub) == len(res)) or not lb:
            raise ValueError("bounds and resolution must have the same non-zero length")
        for i, (lo, hi, r) in enumerate(zip(lb, ub, res)):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise ValueError(f"dimension {i}: need finite lower < upper, got [{lo}, {hi}]")
            if r < 1:
                raise ValueError(f"dimension {i}: resolution must be >= 1, got {r}")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must lie in [0, 1], got {self.learning_rate}")
        object.__setattr__(self, "lower_bounds", lb)
        object.__setattr__(self, "upper_bounds", ub)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        object.__setattr__(self, "threshold_floor", float(self.threshold_floor))

    @property
    def dims(self) -> int:
        return len(self.resolution)

    @property
    def cells(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def cell_widths(self) -> np.ndarray:
        return (np.array(self.upper_bounds) - np.array(self.lower_bounds)) / np.array(self.resolution)


@dataclass
class Solution:
    params: np.ndarray
    objective: float
    measures: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self.measures = np.asarray(self.measures, dtype=float)
        self.objective = float(self.objective)


@dataclass
class Cell:
    threshold: float
    occupant: Solution | None = None


class AddStatus(enum.IntEnum):
    REJECTED = 0
    IMPROVED = 1
    NEW_CELL = 2


@dataclass(frozen=True)
class AddResult:
    status: AddStatus
    improvement: float
    cell_index: tuple[int, ...]
    error: str | None = None


def map_to_cell(measures: Sequence[float], config: ArchiveConfig) -> tuple[int, ...]:
    """Grid index of a measure vector. Out-of-range values clip to the boundary cells."""
    m = np.asarray(measures, dtype=float)
    if m.shape != (config.dims,):
        raise ValueError(f"expected {config.dims} measures, got shape {m.shape}")
    lb = np.array(config.lower_bounds)
    ub = np.array(config.upper_bounds)
    res = np.array(config.resolution)
    if np.any(np.isnan(m)):
        raise ValueError("measures contain NaN")
    clipped = np.clip(m, lb, ub - _UPPER_EPS * (ub - lb))
    idx = np.floor((clipped - lb) / config.cell_widths).astype(int)
    # Guard against floating point landing exactly on the upper edge.
    idx = np.minimum(idx, res - 1)
    return tuple(int(i) for i in idx)


def compute_improvement(candidate_objective: float, cell: Cell, config: ArchiveConfig) -> float:
    """Archive improvement of a candidate against the cell's acceptance threshold.

    For an elitist archive (learning rate 1, floor 0) the threshold always equals
    the incumbent's objective, or 0 for an empty cell.
    """
    del config  # threshold already carries the floor
    return float(candidate_objective) - cell.threshold


class GridArchive:
    """Uniform tessellation of measure space holding one elite per cell.

    Each cell keeps an acceptance threshold. A candidate whose objective exceeds
    the threshold moves it toward the candidate by ``learning_rate``; the
    occupant is replaced only by a strictly better objective.
    """

    def __init__(self, config: ArchiveConfig):
        self.config = config
        self._cells: dict[tuple[int, ...], Cell] = {}

    def __len__(self) -> int:
        return sum(1 for c in self._cells.values() if c.occupant is not None)

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], Solution]]:
        for idx in sorted(self._cells):
            occ = self._cells[idx].occupant
            if occ is not None:
                yield idx, occ

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def cell(self, index: Sequence[int]) -> Cell:
        index = tuple(int(i) for i in index)
        c = self._cells.get(index)
        if c is None:
            return Cell(threshold=self.config.threshold_floor)
        return c

    def threshold(self, index: Sequence[int]) -> float:
        return self.cell(index).threshold

    def index_of(self, measures: Sequence[float]) -> tuple[int, ...]:
        return map_to_cell(measures, self.config)

    def add(self, solution: Solution) -> AddResult:
        cfg = self.config
        idx = self.index_of(solution.measures)
        f = solution.objective
        if not math.isfinite(f):
            return AddResult(AddStatus.REJECTED, -math.inf, idx, error="non-finite objective")

        cell = self._cells.get(idx)
        if cell is None:
            cell = Cell(threshold=cfg.threshold_floor)
        delta = compute_improvement(f, cell, cfg)
        if delta <= 0.0:
            return AddResult(AddStatus.REJECTED, delta, idx)

        was_empty = cell.occupant is None
        alpha = cfg.learning_rate
        cell.threshold = (1.0 - alpha) * cell.threshold + alpha * f
        if was_empty or f > cell.occupant.objective:
            cell.occupant = solution
        self._cells[idx] = cell
        return AddResult(AddStatus.NEW_CELL if was_empty else AddStatus.IMPROVED, delta, idx)

    def add_batch(self, solutions: Sequence[Solution]) -> list[AddResult]:
        return [self.add(s) for s in solutions]

    def qd_score(self) -> float:
        return float(sum(s.objective for _, s in self))

    def coverage(self) -> float:
        return len(self) / self.config.cells

    def best_objective(self) -> float:
        objs = [s.objective for _, s in self]
        return max(objs) if objs else 0.0

    def elites(self) -> list[Solution]:
        return [s for _, s in self]

    def sample_elites(self, count: int, rng: np.random.Generator) -> list[Solution]:
        elites = self.elites()
        if not elites:
            raise ValueError("cannot sample from an empty archive")
        picks = rng.integers(len(elites), size=count)
        return [elites[i] for i in picks]

    def reset(self) -> None:
        self._cells.clear()

    def cell_lower_corner(self, index: Sequence[int]) -> np.ndarray:
        return np.array(self.config.lower_bounds) + np.asarray(index) * self.config.cell_widths

    # -- export -----------------------------------------------------------

    def csv_header(self, n_params: int) -> list[str]:
        k = self.config.dims
        return (
            [f"cell_idx_{i}" for i in range(k)]
            + [f"measure_lb_{i}" for i in range(k)]
            + ["objective", "threshold"]
            + [f"param_{i}" for i in range(n_params)]
        )

    def to_csv(self, path: str | Path | None = None, n_params: int | None = None) -> str:
        """Serialize occupied cells. Floats use ``repr`` so the round trip is exact."""
        rows = list(self)
        if n_params is None:
            n_params = len(rows[0][1].params) if rows else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header(n_params))
        for idx, sol in rows:
            lb = self.cell_lower_corner(idx)
            writer.writerow(
                [str(i) for i in idx]
                + [repr(float(v)) for v in lb]
                + [repr(sol.objective), repr(self._cells[idx].threshold)]
                + [repr(float(v)) for v in sol.params]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path, config: ArchiveConfig) -> GridArchive:
        return cls.from_csv_text(Path(path).read_text(), config)

    @classmethod
    def from_csv_text(cls, text: str, config: ArchiveConfig) -> GridArchive:
        """Rebuild an archive from its CSV export.

        Occupant measures are not stored, so each restored occupant gets the
        lower corner of its cell as measures. Thresholds are restored exactly.
        """
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            raise ValueError("archive CSV is empty")
        k = config.dims
        n_params = len(header) - 2 * k - 2
        if n_params < 0 or header != cls(config).csv_header(n_params):
            raise ValueError("CSV header does not match archive configuration")
        archive = cls(config)
        for row in reader:
            idx = tuple(int(v) for v in row[:k])
            lb = np.array([float(v) for v in row[k : 2 * k]])
            obj = float(row[2 * k])
            thr = float(row[2 * k + 1])
            params = np.array([float(v) for v in row[2 * k + 2 :]])
            archive._cells[idx] = Cell(threshold=thr, occupant=Solution(params, obj, lb))
        return archive

    def heatmap(self) -> np.ndarray:
        """8-bit intensity grid for 2D archives; rows follow measure 1, columns measure 0."""
        if self.config.dims != 2:
            raise ValueError("heatmap requires a 2D archive")
        return objective_grid_to_pixels(
            self.config.resolution, {idx: s.objective for idx, s in self}
        )

    def to_pgm(self, path: str | Path | None = None) -> bytes:
        data = encode_pgm(self.heatmap())
        if path is not None:
            Path(path).write_bytes(data)
        return data


def objective_grid_to_pixels(resolution: Sequence[int], objectives: dict[tuple[int, ...], float]) -> np.ndarray:
    """Linearly map [min, max] occupant objective to [0, 255]; empty cells stay 0."""
    nx, ny = resolution
    img = np.zeros((ny, nx), dtype=np.uint8)
    if not objectives:
        return img
    vals = np.array(list(objectives.values()))
    lo, hi = vals.min(), vals.max()
    for (i, j), v in objectives.items():
        level = 255.0 if hi == lo else 255.0 * (v - lo) / (hi - lo)
        img[j, i] = int(round(level))
    return img


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
