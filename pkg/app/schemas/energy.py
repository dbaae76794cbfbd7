from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.cloud import Window


class Kernel(BaseModel):
    """
    Radially symmetric interaction weight a(z) of the rescaled offset z = (x-y)/ε,
    supported in the open ball B_λ.
    """

    kind: Literal["indicator", "scaled_indicator", "cone"] = "indicator"
    support: float = Field(gt=0)
    scale: float = Field(default=1.0, ge=0)

    model_config = ConfigDict(frozen=True)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        inside = z < self.support
        if self.kind == "cone":
            return np.where(inside, self.scale * (1.0 - z / self.support), 0.0)
        c = 1.0 if self.kind == "indicator" else self.scale
        return np.where(inside, c, 0.0)


class EnergySpec(BaseModel):
    radius: float = Field(gt=0)
    region: Window
    kernel: Optional[Kernel] = None
    eps: float = Field(default=1.0, gt=0)

    model_config = ConfigDict(frozen=True)
