import math
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import settings

Direction = Tuple[float, float]
_DIAGONAL = (1 / math.sqrt(2), 1 / math.sqrt(2))


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")


class XiSweepParams(_Params):
    sizes: List[float] = Field(default_factory=lambda: [20.0, 40.0, 80.0], min_length=1)
    seeds: int = Field(default=10, ge=1)
    directions: List[Direction] = Field(default_factory=lambda: [(1.0, 0.0), (0.0, 1.0), _DIAGONAL], min_length=1)
    lam: float = Field(default=3.0, gt=0)
    gamma: float = Field(default=1.0, gt=0)
    tol: float = Field(default=1e-10, gt=0)
    mode: Literal["poisson", "lattice"] = "poisson"
    spacing: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.0, ge=0)


class LatticeOracleParams(_Params):
    sizes: List[float] = Field(default_factory=lambda: [80.0], min_length=1)
    directions: List[Direction] = Field(default_factory=lambda: [(1.0, 0.0)], min_length=1)
    lam: float = Field(default=1.2, gt=0)
    spacing: float = Field(default=1.0, gt=0)
    tol: float = Field(default=1e-10, gt=0)


class PercolationSweepParams(_Params):
    probabilities: List[float] = Field(default_factory=lambda: [0.4, 0.6, 0.75, 0.9], min_length=1)
    width: int = Field(default=50, ge=1)
    aspect: float = Field(default=settings.RECT_ASPECT, gt=0)
    fields: int = Field(default=200, ge=1)
    strategy: Literal["greedy", "maxflow"] = "greedy"

    @field_validator("probabilities")
    @classmethod
    def unit_interval(cls, v: List[float]) -> List[float]:
        if any(not 0 <= p <= 1 for p in v):
            raise ValueError("probabilities must lie in [0, 1]")
        return v

    @property
    def height(self) -> int:
        return max(1, int(round(self.aspect * self.width)))


class GridParams(_Params):
    """A point-cloud η_ε sampled around the working square of Q_side and its grid parameters."""

    eps: float = Field(default=0.005, gt=0)
    t: float = Field(default=0.25, gt=0)
    alpha: float = Field(default=0.05, gt=0)
    lam: float = Field(default=2.0, gt=0)
    block_factor: int = Field(default=settings.BLOCK_FACTOR, ge=10)
    upsilon: float = Field(default=100.0, ge=1)
    domain_side: float = Field(default=1.0, gt=0)
    mode: Literal["poisson", "lattice"] = "lattice"
    gamma: float = Field(default=1.0, gt=0)
    spacing: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.2, ge=0)
    strategy: Literal["greedy", "maxflow"] = "greedy"
    construction: Literal["strips", "junction"] = "strips"


class GridSuccessParams(GridParams):
    """Scaled Poisson clouds by default; blocks of side Λλε = t/2 tile each strip."""

    seeds: int = Field(default=20, ge=1)
    mode: Literal["poisson", "lattice"] = "poisson"
    t: float = Field(default=0.4, gt=0)
    alpha: float = Field(default=1e-4, gt=0)
    lam: float = Field(default=4.0, gt=0)
    block_factor: int = Field(default=10, ge=10)
    domain_side: float = Field(default=0.4, gt=0)


class ConvergenceParams(GridParams):
    """Defaults keep the block side Λλε a divisor of t for every ε in the list."""

    eps_list: List[float] = Field(default_factory=lambda: [0.02, 0.01, 0.005], min_length=1)
    t: float = Field(default=0.5, gt=0)
    lam: float = Field(default=2.5, gt=0)
    block_factor: int = Field(default=10, ge=10)
    reference: Literal["constant", "linear", "quadratic"] = "quadratic"
    seed: int = Field(default=0, ge=0)


class _ExperimentBase(BaseModel):
    master_seed: int = Field(default=0, ge=0)
    output_dir: str = settings.OUTPUT_DIR
    threads: Optional[int] = Field(default=None, ge=1)

    model_config = ConfigDict(extra="forbid")


class XiSweepConfig(_ExperimentBase):
    kind: Literal["xi-sweep"] = "xi-sweep"
    params: XiSweepParams = Field(default_factory=XiSweepParams)


class IsotropyConfig(_ExperimentBase):
    kind: Literal["isotropy"] = "isotropy"
    params: XiSweepParams = Field(default_factory=XiSweepParams)


class LatticeOracleConfig(_ExperimentBase):
    kind: Literal["lattice-oracle"] = "lattice-oracle"
    params: LatticeOracleParams = Field(default_factory=LatticeOracleParams)


class PercolationSweepConfig(_ExperimentBase):
    kind: Literal["percolation-sweep"] = "percolation-sweep"
    params: PercolationSweepParams = Field(default_factory=PercolationSweepParams)


class GridSuccessConfig(_ExperimentBase):
    kind: Literal["grid-success"] = "grid-success"
    params: GridSuccessParams = Field(default_factory=GridSuccessParams)


class ConvergenceConfig(_ExperimentBase):
    kind: Literal["convergence"] = "convergence"
    params: ConvergenceParams = Field(default_factory=ConvergenceParams)


ExperimentConfig = Annotated[
    Union[XiSweepConfig, IsotropyConfig, LatticeOracleConfig, PercolationSweepConfig, GridSuccessConfig,
          ConvergenceConfig],
    Field(discriminator="kind"),
]


class ManifestFile(BaseModel):
    name: str
    schema_name: str
    version: int
    rows: int
    sha256: str


class ExperimentManifest(BaseModel):
    schema_version: int = 1
    kind: str
    rng: str
    config: dict
    files: List[ManifestFile] = Field(default_factory=list)

    def file(self, name: str) -> ManifestFile:
        for f in self.files:
            if f.name == name:
                return f
        raise KeyError(name)
