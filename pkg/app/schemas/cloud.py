import math
from functools import cached_property
from typing import Annotated, Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from shapely.geometry import Polygon

from app.core.config import settings
from app.core.rng import RandomStream


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _frozen_array(values, dtype, shape_tail: Tuple[int, ...] = ()) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if shape_tail:
        arr = arr.reshape((-1,) + shape_tail)
    else:
        arr = arr.reshape(-1)
    arr.setflags(write=False)
    return arr


# --- Windows ---
class Window(BaseModel):
    """Closed rectangle ``center + M(angle) [-w/2, w/2] x [-h/2, h/2]``."""

    center: Tuple[float, float] = (0.0, 0.0)
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    angle: float = 0.0

    model_config = ConfigDict(frozen=True)

    @field_validator("center")
    @classmethod
    def finite_center(cls, v):
        if not all(math.isfinite(c) for c in v):
            raise ValueError("window center must be finite")
        return (float(v[0]), float(v[1]))

    @field_validator("width", "height", "angle")
    @classmethod
    def finite_sizes(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("window parameters must be finite")
        return float(v)

    @classmethod
    def square(cls, r: float, center: Sequence[float] = (0.0, 0.0)) -> "Window":
        """Q_r(x) = x + rQ."""
        return cls(center=tuple(center), width=r, height=r)

    @classmethod
    def unit(cls) -> "Window":
        return cls.square(1.0)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def half(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    @property
    def is_axis_aligned(self) -> bool:
        return self.angle == 0.0

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """Bounding box (xmin, ymin, xmax, ymax); exact for axis-aligned windows."""
        c = self.corners()
        return (float(c[:, 0].min()), float(c[:, 1].min()), float(c[:, 0].max()), float(c[:, 1].max()))

    def to_local(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2) - np.asarray(self.center)
        if self.angle == 0.0:
            return pts
        return pts @ rotation_matrix(self.angle)

    def to_global(self, local) -> np.ndarray:
        loc = np.asarray(local, dtype=float).reshape(-1, 2)
        if self.angle != 0.0:
            loc = loc @ rotation_matrix(self.angle).T
        return loc + np.asarray(self.center)

    def corners(self) -> np.ndarray:
        hw, hh = self.half
        return self.to_global(np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]))

    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    def contains(self, points, closed: bool = True, tol: float = 0.0) -> np.ndarray:
        loc = np.abs(self.to_local(points))
        hw, hh = self.half
        if closed:
            return (loc[:, 0] <= hw + tol) & (loc[:, 1] <= hh + tol)
        return (loc[:, 0] < hw - tol) & (loc[:, 1] < hh - tol)

    def distance_to(self, points) -> np.ndarray:
        """Euclidean distance to the closed rectangle (0 inside)."""
        loc = np.abs(self.to_local(points))
        gap = np.maximum(loc - self.half, 0.0)
        return np.hypot(gap[:, 0], gap[:, 1])

    def distance_to_boundary(self, points) -> np.ndarray:
        """dist(x, ∂W), closed form in the window frame."""
        loc = np.abs(self.to_local(points))
        inner = np.min(self.half - loc, axis=1)
        outside = inner < 0
        out = inner.copy()
        if outside.any():
            gap = np.maximum(loc[outside] - self.half, 0.0)
            out[outside] = np.hypot(gap[:, 0], gap[:, 1])
        return out

    def enlarged(self, r: float) -> "Window":
        """Smallest window of the same orientation containing the r-enlargement."""
        return Window(center=self.center, width=self.width + 2 * r, height=self.height + 2 * r, angle=self.angle)

    def contains_enlargement(self, other: "Window", r: float, tol: Optional[float] = None) -> bool:
        """True when (other)_r is inside this window.

        The inner boundary distance is concave on a convex window, so checking
        the corners of ``other`` suffices.
        """
        if tol is None:
            tol = settings.GEOMETRY_TOL * max(1.0, self.width, self.height)
        corners = other.corners()
        if not self.contains(corners, tol=tol).all():
            return False
        loc = np.abs(self.to_local(corners))
        inner = np.min(self.half - loc, axis=1)
        return bool(np.all(inner >= r - tol))


# --- Transforms ---
class ScaleOp(BaseModel):
    kind: Literal["scale"] = "scale"
    factor: float = Field(gt=0)
    model_config = ConfigDict(frozen=True)


class TranslateOp(BaseModel):
    kind: Literal["translate"] = "translate"
    offset: Tuple[float, float]
    model_config = ConfigDict(frozen=True)


class RotateOp(BaseModel):
    """Counter-clockwise rotation about the origin."""
    kind: Literal["rotate"] = "rotate"
    angle: float
    model_config = ConfigDict(frozen=True)


TransformOp = Annotated[Union[ScaleOp, TranslateOp, RotateOp], Field(discriminator="kind")]


# --- Clouds ---
class CloudMeta(BaseModel):
    seed: Optional[int] = None
    intensity: Optional[float] = None
    source: str = "poisson"
    transforms: Tuple[TransformOp, ...] = ()

    model_config = ConfigDict(frozen=True)


class PointCloud(BaseModel):
    """Finite simple point set inside a window.

    ``points[k]`` carries the label ``ids[k]``. Arrays are read-only.
    """

    points: np.ndarray
    ids: np.ndarray
    window: Window
    meta: CloudMeta = CloudMeta()

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="before")
    @classmethod
    def coerce_arrays(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            points = _frozen_array(data.get("points", []), np.float64, (2,))
            data["points"] = points
            ids = data.get("ids")
            data["ids"] = _frozen_array(np.arange(len(points)) if ids is None else ids, np.int64)
        return data

    @model_validator(mode="after")
    def check_simple_measure(self) -> "PointCloud":
        n = len(self.points)
        if len(self.ids) != n:
            raise ValueError(f"{len(self.ids)} ids for {n} points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if n and len(np.unique(self.ids)) != n:
            raise ValueError("point ids must be unique")
        if n and len(np.unique(self.points, axis=0)) != n:
            raise ValueError("duplicate point coordinates (measure is not simple)")
        tol = settings.GEOMETRY_TOL * max(1.0, self.window.width, self.window.height)
        if n and not self.window.contains(self.points, tol=tol).all():
            raise ValueError("points outside the cloud window")
        return self

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def _id_order(self) -> np.ndarray:
        return np.argsort(self.ids, kind="stable")

    def index_of(self, ids) -> np.ndarray:
        """Positions of the given ids; raises KeyError for unknown ids."""
        query = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        order = self._id_order
        sorted_ids = self.ids[order]
        pos = np.searchsorted(sorted_ids, query)
        pos = np.clip(pos, 0, max(len(sorted_ids) - 1, 0))
        if len(sorted_ids) == 0 or np.any(sorted_ids[pos] != query):
            missing = query[(len(sorted_ids) == 0) | (sorted_ids[pos] != query)]
            raise KeyError(f"unknown point ids: {missing[:5].tolist()}")
        return order[pos]

    def subset(self, mask) -> "PointCloud":
        mask = np.asarray(mask)
        return PointCloud(points=self.points[mask], ids=self.ids[mask], window=self.window, meta=self.meta)

    def count_in(self, window: Window, closed: bool = False) -> int:
        if not len(self):
            return 0
        return int(window.contains(self.points, closed=closed).sum())


class ScalarField(BaseModel):
    """Real values aligned with the positions of ``cloud``."""

    cloud: PointCloud
    values: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @field_validator("values", mode="before")
    @classmethod
    def coerce_values(cls, v):
        return _frozen_array(v, np.float64)

    @model_validator(mode="after")
    def aligned(self) -> "ScalarField":
        if len(self.values) != len(self.cloud):
            raise ValueError(f"{len(self.values)} values for {len(self.cloud)} points")
        return self

    @classmethod
    def from_function(cls, cloud: PointCloud, fn: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        if not len(cloud):
            return cls(cloud=cloud, values=[])
        return cls(cloud=cloud, values=np.asarray(fn(cloud.points), dtype=float).reshape(-1))

    @classmethod
    def from_mapping(cls, cloud: PointCloud, mapping: Mapping[int, float]) -> "ScalarField":
        keys = set(int(k) for k in mapping)
        known = set(cloud.ids.tolist())
        if keys != known:
            orphans = sorted(keys - known)[:5]
            missing = sorted(known - keys)[:5]
            raise ValueError(f"field ids do not match cloud (orphans={orphans}, missing={missing})")
        return cls(cloud=cloud, values=[mapping[int(i)] for i in cloud.ids])

    @classmethod
    def constant(cls, cloud: PointCloud, value: float) -> "ScalarField":
        return cls(cloud=cloud, values=np.full(len(cloud), float(value)))

    def value(self, point_id: int) -> float:
        return float(self.values[self.cloud.index_of(point_id)[0]])

    def as_mapping(self) -> Dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.cloud.ids, self.values)}


class SamplingSpec(BaseModel):
    window: Window
    intensity: float = Field(ge=0)
    padding: float = Field(default=0.0, ge=0)
    stream: RandomStream

    @field_validator("intensity", "padding")
    @classmethod
    def finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @property
    def padded_window(self) -> Window:
        return self.window.enlarged(self.padding)
