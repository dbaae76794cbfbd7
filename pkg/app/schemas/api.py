from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

from app.core.config import settings
from app.schemas.cloud import CloudMeta, PointCloud, Window
from app.schemas.energy import Kernel


# --- Clouds ---
class CloudPayload(BaseModel):
    points: List[Tuple[float, float]]
    ids: Optional[List[int]] = None
    window: Window
    seed: Optional[int] = None
    intensity: Optional[float] = None

    def to_cloud(self) -> PointCloud:
        return PointCloud(points=self.points, ids=self.ids, window=self.window,
                          meta=CloudMeta(seed=self.seed, intensity=self.intensity, source="api"))

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "CloudPayload":
        return cls(points=[tuple(p) for p in cloud.points.tolist()], ids=cloud.ids.tolist(), window=cloud.window,
                   seed=cloud.meta.seed, intensity=cloud.meta.intensity)


class SampleRequest(BaseModel):
    window: Window
    mode: Literal["poisson", "lattice"] = "poisson"
    intensity: float = Field(default=1.0, ge=0)
    padding: float = Field(default=0.0, ge=0)
    spacing: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.0, ge=0)
    seed: int = Field(default=0, ge=0)


class EnergyRequest(BaseModel):
    """Energy of either explicit per-point values or the affine field ξ·x."""

    cloud: CloudPayload
    region: Window
    radius: float = Field(gt=0)
    values: Optional[List[float]] = None
    xi: Optional[Tuple[float, float]] = None
    kernel: Optional[Kernel] = None
    eps: float = Field(default=1.0, gt=0)


class EnergyResponse(BaseModel):
    energy: float
    points_in_region: int
    boundary_points: int


# --- Cell problem ---
class CellSolveRequest(BaseModel):
    cloud: CloudPayload
    T: Optional[float] = Field(default=None, gt=0)
    region: Optional[Window] = None
    lam: float = Field(gt=0)
    xi: Tuple[float, float] = (1.0, 0.0)
    tol: Optional[float] = Field(default=None, gt=0)
    return_field: bool = False


class XiRequest(BaseModel):
    sizes: List[float] = Field(min_length=1)
    seeds: int = Field(default=1, ge=1)
    directions: List[Tuple[float, float]] = Field(default_factory=lambda: [(1.0, 0.0)], min_length=1)
    lam: float = Field(gt=0)
    gamma: float = Field(default=1.0, gt=0)
    tol: float = Field(default=1e-10, gt=0)
    mode: Literal["poisson", "lattice"] = "poisson"
    spacing: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.0, ge=0)
    master_seed: int = Field(default=0, ge=0)


class XiResponse(BaseModel):
    xi_estimate: float
    xi_uncertainty: float
    fit_sizes: List[float]
    failed_rows: int
    rows: List[Dict[str, Any]]
    aggregates: List[Dict[str, Any]]


# --- Grids ---
class GridRequest(BaseModel):
    cloud: CloudPayload
    eps: float = Field(gt=0)
    t: float = Field(gt=0)
    alpha: float = Field(gt=0)
    lam: float = Field(gt=0)
    block_factor: int = Field(default=settings.BLOCK_FACTOR, ge=10)
    upsilon: float = Field(default=100.0, ge=1)
    domain: Window = Field(default_factory=Window.unit)
    strategy: Literal["greedy", "maxflow"] = "greedy"
    construction: Literal["strips", "junction"] = "strips"


class GridResponse(BaseModel):
    success: bool
    grid: Optional[Dict[str, Any]] = None
    failure: Optional[Dict[str, Any]] = None
    discarded: Dict[str, int] = Field(default_factory=dict)
    validation: Optional[Dict[str, Any]] = None


class ConvergeRequest(BaseModel):
    cloud: CloudPayload
    values: List[float]
    grid: Dict[str, Any]
    reference: Literal["constant", "linear", "quadratic"] = "quadratic"
    ref_value: float = 0.0
    ref_xi: Tuple[float, float] = (1.0, 0.0)


# --- Experiments ---
class ExperimentRequest(BaseModel):
    config: Dict[str, Any]
    output_dir: Optional[str] = None
