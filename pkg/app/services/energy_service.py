import logging
import math
from typing import Dict, Optional, Sequence

import numpy as np

from app.core.exceptions import InvalidInputError, PaddingError
from app.schemas.cloud import PointCloud, ScalarField, Window
from app.schemas.energy import EnergySpec, Kernel
from app.schemas.geometry import NeighborIndex
from app.services.geometry_service import GeometryService, pair_distance

logger = logging.getLogger(__name__)


class EnergyService:

    @staticmethod
    def check_padding(cloud: PointCloud, region: Window, radius: float) -> None:
        if not cloud.window.contains_enlargement(region, radius):
            raise PaddingError(
                f"cloud window {cloud.window.width:g}x{cloud.window.height:g} does not contain "
                f"the {radius:g}-enlargement of the evaluation region"
            )

    @staticmethod
    def _index(cloud: PointCloud, radius: float, index: Optional[NeighborIndex]) -> NeighborIndex:
        if index is None:
            return GeometryService.build_neighbor_index(cloud, radius)
        if index.radius != radius or len(index) != len(cloud):
            raise InvalidInputError(f"neighbor index radius {index.radius} does not match {radius}")
        return index

    @staticmethod
    def _region_pairs(cloud: PointCloud, region: Window, index: NeighborIndex):
        """Ordered pairs (x, y) with x in the closed region, in CSR order."""
        rows, cols = index.pairs()
        in_a = region.contains(cloud.points) if len(cloud) else np.zeros(0, dtype=bool)
        keep = in_a[rows]
        return rows[keep], cols[keep], in_a

    @staticmethod
    def dirichlet_energy(u: ScalarField, spec: EnergySpec, index: Optional[NeighborIndex] = None) -> float:
        """
        F(u; A) = Σ_{x∈A} Σ_{y∈B_R(x)} (u(x) - u(y))², ordered pairs.
        Pairs inside A are counted twice, pairs leaving A once.
        """
        cloud = u.cloud
        EnergyService.check_padding(cloud, spec.region, spec.radius)
        if not len(cloud):
            return 0.0
        idx = EnergyService._index(cloud, spec.radius, index)
        rows, cols, _ = EnergyService._region_pairs(cloud, spec.region, idx)
        diff = u.values[rows] - u.values[cols]
        return float(np.sum(diff * diff))

    @staticmethod
    def kernel_energy(u: ScalarField, spec: EnergySpec, eps: Optional[float] = None,
                      index: Optional[NeighborIndex] = None) -> float:
        """Σ_{x∈A} Σ_y a((x-y)/ε) (u(x) - u(y))²; the neighbor radius must cover supp(a)·ε."""
        kernel = spec.kernel
        if kernel is None:
            raise InvalidInputError("kernel_energy requires a kernel")
        eps = spec.eps if eps is None else eps
        if kernel.support * eps > spec.radius * (1 + 1e-12):
            raise InvalidInputError(
                f"kernel support {kernel.support}·ε exceeds the interaction radius {spec.radius}"
            )
        cloud = u.cloud
        EnergyService.check_padding(cloud, spec.region, spec.radius)
        if not len(cloud):
            return 0.0
        idx = EnergyService._index(cloud, spec.radius, index)
        rows, cols, _ = EnergyService._region_pairs(cloud, spec.region, idx)
        weights = kernel(pair_distance(cloud.points[rows], cloud.points[cols]) / eps)
        diff = u.values[rows] - u.values[cols]
        return float(np.sum(weights * diff * diff))

    @staticmethod
    def pair_count(cloud: PointCloud, eps: float, lam: float, region: Window) -> float:
        """ε² Σ_{x∈η_ε∩A} η_ε(B_{λε}(x)), the ball count including x."""
        radius = lam * eps
        EnergyService.check_padding(cloud, region, radius)
        if not len(cloud):
            return 0.0
        idx = GeometryService.build_neighbor_index(cloud, radius)
        in_a = region.contains(cloud.points)
        counts = idx.degrees()[in_a] + 1
        return float(eps ** 2 * np.sum(counts))

    @staticmethod
    def boundary_set(cloud: PointCloud, region: Window, radius: float) -> np.ndarray:
        """Ids of points outside A that interact with some point of A."""
        if not len(cloud):
            return np.zeros(0, dtype=np.int64)
        idx = GeometryService.build_neighbor_index(cloud, radius)
        rows, cols, in_a = EnergyService._region_pairs(cloud, region, idx)
        outer = np.unique(cols[~in_a[cols]])
        return cloud.ids[outer]

    @staticmethod
    def affine_field(cloud: PointCloud, xi: Sequence[float], offset: float = 0.0) -> ScalarField:
        xi = np.asarray(xi, dtype=float)
        return ScalarField.from_function(cloud, lambda p: p @ xi + offset)

    @staticmethod
    def energy_constants(lam: float) -> Dict[str, float]:
        """Poisson (Mecke) expectations per unit area at unit intensity."""
        return {
            "pair_count_density": 1.0 + math.pi * lam ** 2,
            "affine_energy_density": math.pi * lam ** 4 / 4.0,
        }

    @staticmethod
    def indicator_kernel(lam: float, scale: float = 1.0) -> Kernel:
        if scale == 1.0:
            return Kernel(kind="indicator", support=lam)
        return Kernel(kind="scaled_indicator", support=lam, scale=scale)
