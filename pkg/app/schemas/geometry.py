from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, PrivateAttr
from scipy.sparse import csr_matrix

from app.core.exceptions import GeometryError
from app.schemas.cloud import Window


class NeighborIndex(BaseModel):
    """Strict fixed-radius neighbor lists in CSR form over cloud positions."""

    radius: float
    cell_size: float
    ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def __len__(self) -> int:
        return len(self.ids)

    def neighbors(self, pos: int) -> np.ndarray:
        return self.indices[self.indptr[pos]:self.indptr[pos + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def pairs(self):
        """Ordered pairs (i, j), sorted by i then j."""
        rows = np.repeat(np.arange(len(self.ids)), self.degrees())
        return rows, self.indices


class VoronoiDiagram(BaseModel):
    """Voronoi cells of a cloud clipped to a window.

    ``cells[k]`` holds the counter-clockwise vertices of the cell of the point
    at position ``k``. The exact in-radius is solved lazily; ``clearance`` is
    the generator-to-edge distance, a lower bound for it.
    """

    ids: np.ndarray
    points: np.ndarray
    clip: Window
    cells: List[np.ndarray]
    area: np.ndarray
    diameter: np.ndarray
    clearance: np.ndarray
    boundary: np.ndarray
    adj_indptr: Optional[np.ndarray] = None
    adj_indices: Optional[np.ndarray] = None
    adjacency_error: Optional[str] = None

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    _inradius: Dict[int, float] = PrivateAttr(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def _require_adjacency(self) -> None:
        if self.adj_indptr is None:
            raise GeometryError(self.adjacency_error or "adjacency unavailable")

    def neighbors(self, pos: int) -> np.ndarray:
        self._require_adjacency()
        return self.adj_indices[self.adj_indptr[pos]:self.adj_indptr[pos + 1]]

    def edges(self) -> np.ndarray:
        """Nearest-neighbor pairs (i < j) as an (m, 2) array of positions."""
        self._require_adjacency()
        rows = np.repeat(np.arange(len(self.ids)), np.diff(self.adj_indptr))
        keep = rows < self.adj_indices
        return np.column_stack([rows[keep], self.adj_indices[keep]])

    def adjacency_matrix(self):
        self._require_adjacency()
        n = len(self.ids)
        data = np.ones(len(self.adj_indices), dtype=np.int8)
        return csr_matrix((data, self.adj_indices, self.adj_indptr), shape=(n, n))

    def are_neighbors(self, i: int, j: int) -> bool:
        return bool(np.any(self.neighbors(i) == j))


class RegularMask(BaseModel):
    alpha: float
    lam: float
    scale: float = 1.0
    ids: np.ndarray
    mask: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def regular_ids(self) -> np.ndarray:
        return self.ids[self.mask]
