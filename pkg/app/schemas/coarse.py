import math
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.cloud import Window


class SquarePartition(BaseModel):
    """
    The squares Q_t(J), J ∈ tℤ², meeting the domain. They tile the working
    square Q_{t·k_t}; square (i, j) sits on row i (bottom to top) and column j.
    """

    t: float = Field(gt=0)
    k_t: int = Field(ge=1)
    domain: Window
    working: Window

    model_config = ConfigDict(frozen=True)

    @property
    def origin(self) -> np.ndarray:
        x0, y0, _, _ = self.working.bounds
        return np.array([x0, y0])

    def square(self, i: int, j: int) -> Window:
        c = self.origin + self.t * (np.array([j, i], dtype=float) + 0.5)
        return Window.square(self.t, tuple(c))

    def centers(self) -> np.ndarray:
        """(k_t, k_t, 2) array of square centers indexed [row, column]."""
        k = np.arange(self.k_t) + 0.5
        xs = self.origin[0] + self.t * k
        ys = self.origin[1] + self.t * k
        return np.stack(np.meshgrid(xs, ys), axis=-1)

    def locate(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Row and column of each point in the half-open squares; -1 outside the working square."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        rel = (pts - self.origin) / self.t
        idx = np.floor(rel).astype(np.int64)
        # the top and right edges of the working square belong to the last squares
        on_edge = (idx == self.k_t) & np.isclose(rel, self.k_t, rtol=0.0, atol=1e-9)
        idx[on_edge] = self.k_t - 1
        outside = ((idx < 0) | (idx >= self.k_t)).any(axis=1)
        idx[outside] = -1
        return idx[:, 1], idx[:, 0]


class GridAverageRecord(BaseModel):
    row: int
    column: int
    count: int
    average: Optional[float] = None

    @property
    def flagged(self) -> bool:
        return self.count == 0


class SimpleFunction(BaseModel):
    """Σ c_{i,j} 1_{Q_{i,j}}; squares without grid points are flagged and carry NaN."""

    t: float
    k_t: int
    origin: Tuple[float, float]
    coefficients: np.ndarray
    counts: np.ndarray
    flags: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def _partition_index(self, points) -> Tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        idx = np.floor((pts - np.asarray(self.origin)) / self.t).astype(np.int64)
        outside = ((idx < 0) | (idx >= self.k_t)).any(axis=1)
        idx[outside] = 0
        return idx, outside

    def evaluate(self, points) -> np.ndarray:
        idx, outside = self._partition_index(points)
        out = self.coefficients[idx[:, 1], idx[:, 0]].astype(float)
        out[outside] = np.nan
        return out

    @property
    def flagged_measure(self) -> float:
        return float(self.flags.sum()) * self.t ** 2

    def records(self) -> List[GridAverageRecord]:
        out = []
        for i in range(self.k_t):
            for j in range(self.k_t):
                avg = None if self.flags[i, j] else float(self.coefficients[i, j])
                out.append(GridAverageRecord(row=i, column=j, count=int(self.counts[i, j]), average=avg))
        return out


class ReferenceFunction(BaseModel):
    """Built-in continuum references: c, ξ·x + c, x₁² - x₂."""

    kind: Literal["constant", "linear", "quadratic"]
    value: float = 0.0
    xi: Tuple[float, float] = (1.0, 0.0)

    model_config = ConfigDict(frozen=True)

    @property
    def degree(self) -> int:
        return {"constant": 0, "linear": 1, "quadratic": 2}[self.kind]

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.kind == "constant":
            return np.full(len(pts), self.value)
        if self.kind == "linear":
            return pts @ np.asarray(self.xi) + self.value
        return pts[:, 0] ** 2 - pts[:, 1]

    @property
    def label(self) -> str:
        if self.kind == "constant":
            return f"constant({self.value:g})"
        if self.kind == "linear":
            return f"linear({self.xi[0]:g},{self.xi[1]:g})"
        return "quadratic"


class ConvergenceRow(BaseModel):
    eps: float
    t: float
    k_t: int
    grid_points: int
    l2_distance: float
    tg_distance: float
    flagged_squares: int
    skipped_measure: float


class ConvergenceReport(BaseModel):
    reference: str
    quadrature_degree: int
    sampling_plan: str
    rows: List[ConvergenceRow] = Field(default_factory=list)

    def table(self) -> List[List[float]]:
        return [[r.eps, r.t, r.k_t, r.grid_points, r.l2_distance, r.tg_distance, r.flagged_squares,
                 r.skipped_measure] for r in self.rows]


CONVERGENCE_HEADER = ["eps", "t", "k_t", "grid_points", "l2_distance", "tg_distance", "flagged_squares",
                      "skipped_measure"]


class EnergyDifferenceRow(BaseModel):
    row: int
    column: int
    delta_sq: float
    energy: float
    ratio: float = math.nan


class EnergyDifferenceReport(BaseModel):
    rows: List[EnergyDifferenceRow] = Field(default_factory=list)
    constant: float = math.nan
