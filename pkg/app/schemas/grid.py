from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.cloud import Window

Orientation = Literal["h", "v"]


class BlockField(BaseModel):
    """Good/bad blocks on a lattice of squares of side ``side``; ``good[ix, iy]``."""

    alpha: float
    lam: float
    block_factor: int
    scale: float = 1.0
    side: float
    origin: Tuple[float, float]
    good: np.ndarray
    cond_counts: Optional[np.ndarray] = None
    cond_spacing: Optional[np.ndarray] = None
    cond_margin: Optional[np.ndarray] = None

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.good.shape)

    def center(self, ix: int, iy: int) -> np.ndarray:
        return np.asarray(self.origin) + self.side * (np.array([ix, iy], dtype=float) + 0.5)

    def block(self, ix: int, iy: int) -> Window:
        return Window.square(self.side, tuple(self.center(ix, iy)))

    def blocks_inside(self, rect: Window, tol: float = 1e-9) -> Tuple[slice, slice]:
        """Index ranges of the blocks fully inside an axis-aligned rectangle."""
        xmin, ymin, xmax, ymax = rect.bounds
        ox, oy = self.origin
        pad = tol * max(1.0, self.side)
        ix0 = max(int(np.ceil((xmin - ox - pad) / self.side)), 0)
        iy0 = max(int(np.ceil((ymin - oy - pad) / self.side)), 0)
        ix1 = min(int(np.floor((xmax - ox + pad) / self.side)), self.good.shape[0])
        iy1 = min(int(np.floor((ymax - oy + pad) / self.side)), self.good.shape[1])
        return slice(ix0, max(ix0, ix1)), slice(iy0, max(iy0, iy1))


class BlockPath(BaseModel):
    direction: Orientation
    blocks: List[Tuple[int, int]]

    @property
    def mean_ordinate(self) -> float:
        axis = 1 if self.direction == "h" else 0
        return float(np.mean([b[axis] for b in self.blocks]))


class PointPath(BaseModel):
    """Ordered cloud ids; consecutive points are Voronoi nearest neighbors."""

    ids: List[int]
    rect: Window
    orientation: Orientation

    def __len__(self) -> int:
        return len(self.ids)


class RegularGrid(BaseModel):
    eps: float
    t: float
    lam: float
    alpha: float
    upsilon: float
    k_t: int
    domain: Window
    working: Window
    horizontal: List[List[PointPath]]
    vertical: List[List[PointPath]]

    @property
    def M(self) -> int:
        counts = [len(p) for p in self.horizontal + self.vertical]
        return min(counts) if counts else 0

    def paths(self, orientation: Optional[Orientation] = None) -> List[Tuple[str, int, int, PointPath]]:
        """(orientation, rectangle index, label, path) for every path."""
        out = []
        if orientation in (None, "h"):
            out += [("h", i, m, p) for i, fam in enumerate(self.horizontal) for m, p in enumerate(fam)]
        if orientation in (None, "v"):
            out += [("v", j, m, p) for j, fam in enumerate(self.vertical) for m, p in enumerate(fam)]
        return out

    def point_ids(self) -> np.ndarray:
        ids = [pid for _, _, _, p in self.paths() for pid in p.ids]
        return np.unique(np.asarray(ids, dtype=np.int64))

    def rectangle(self, orientation: Orientation, index: int) -> Window:
        x0, y0, x1, y1 = self.working.bounds
        if orientation == "h":
            return Window(center=((x0 + x1) / 2, y0 + (index + 0.5) * self.t), width=x1 - x0, height=self.t)
        return Window(center=(x0 + (index + 0.5) * self.t, (y0 + y1) / 2), width=self.t, height=y1 - y0)

    def to_json(self) -> Dict[str, Any]:
        return {
            "eps": self.eps, "t": self.t, "lambda": self.lam, "alpha": self.alpha, "upsilon": self.upsilon,
            "k_t": self.k_t, "M": self.M,
            "domain": self.domain.model_dump(), "working": self.working.model_dump(),
            "horizontal": [[p.ids for p in fam] for fam in self.horizontal],
            "vertical": [[p.ids for p in fam] for fam in self.vertical],
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "RegularGrid":
        base = cls(eps=data["eps"], t=data["t"], lam=data["lambda"], alpha=data["alpha"],
                   upsilon=data["upsilon"], k_t=data["k_t"], domain=Window(**data["domain"]),
                   working=Window(**data["working"]), horizontal=[], vertical=[])
        families = {}
        for o, key in (("h", "horizontal"), ("v", "vertical")):
            families[key] = [[PointPath(ids=[int(i) for i in ids], rect=base.rectangle(o, r), orientation=o)
                              for ids in fam] for r, fam in enumerate(data[key])]
        return base.model_copy(update=families)


class PropertyCheck(BaseModel):
    passed: bool
    witnesses: List[Dict[str, Any]] = Field(default_factory=list)
    detail: str = ""


class GridValidation(BaseModel):
    checks: Dict[str, PropertyCheck]
    upsilon_length: float
    upsilon_count: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failed(self) -> List[str]:
        return [k for k, c in self.checks.items() if not c.passed]


class AssemblyFailure(BaseModel):
    reason: str
    where: List[Dict[str, Any]] = Field(default_factory=list)


class GridAssembly(BaseModel):
    grid: Optional[RegularGrid] = None
    failure: Optional[AssemblyFailure] = None
    discarded: Dict[str, int] = Field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.grid is not None
