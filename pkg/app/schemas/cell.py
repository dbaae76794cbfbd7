from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.sparse import csr_matrix

from app.schemas.cloud import ScalarField, Window


class ClampPartition(BaseModel):
    """Free and clamped cloud positions of a cell problem on ``region``."""

    region: Window
    lam: float
    layer: float
    xi: Tuple[float, float]
    free: np.ndarray
    clamped: np.ndarray
    clamp_values: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def n_clamped(self) -> int:
        return len(self.clamped)


class QuadraticSystem(BaseModel):
    """E(w) = wᵀLw - 2bᵀw + c over the free positions."""

    matrix: csr_matrix
    rhs: np.ndarray
    constant: float
    free: np.ndarray
    clamp_degree: np.ndarray
    region: Window
    lam: float
    xi: Tuple[float, float]

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def value(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ (self.matrix @ w) - 2.0 * self.rhs @ w + self.constant)


class CellProblemSolution(BaseModel):
    xi: Tuple[float, float]
    region: Window
    lam: float
    field: ScalarField
    m: float
    quadratic_value: float
    residual: float
    iterations: int
    wall_time: float
    n_free: int
    n_clamped: int
    isolated_components: int = 0
    free: np.ndarray = np.zeros(0, dtype=np.int64)

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def summary(self) -> dict:
        return {
            "xi": list(self.xi),
            "region": self.region.model_dump(),
            "lambda": self.lam,
            "m": self.m,
            "quadratic_value": self.quadratic_value,
            "residual": self.residual,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "n_free": self.n_free,
            "n_clamped": self.n_clamped,
            "isolated_components": self.isolated_components,
        }


# --- Ξ sweeps ---
class XiPlan(BaseModel):
    sizes: List[float] = Field(min_length=1)
    seeds: List[int] = Field(min_length=1)
    directions: List[Tuple[float, float]] = Field(min_length=1)
    lam: float = Field(gt=0)
    gamma: float = Field(default=1.0, gt=0)
    tol: float = Field(default=1e-10, gt=0)
    mode: Literal["poisson", "lattice"] = "poisson"
    spacing: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.0, ge=0)
    master_seed: int = Field(default=0, ge=0)
    threads: Optional[int] = Field(default=None, ge=1)

    @field_validator("directions")
    @classmethod
    def nonzero(cls, v):
        if any(x == 0 and y == 0 for x, y in v):
            raise ValueError("directions must be nonzero")
        return v


class XiRow(BaseModel):
    T: float
    seed: int
    xi_x: float
    xi_y: float
    m: float
    m_normalized: float
    residual: float
    iters: int
    affine_normalized: float = float("nan")
    status: str = "ok"
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class XiAggregate(BaseModel):
    T: float
    n: int
    mean: float
    std: float
    direction_means: List[float]
    direction_spread: float


class XiEstimate(BaseModel):
    rows: List[XiRow]
    aggregates: List[XiAggregate]
    xi_estimate: float
    xi_uncertainty: float
    fit_sizes: List[float]
    fit_slope: float = float("nan")
    failed_rows: int = 0
