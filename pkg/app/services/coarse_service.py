import logging
import math
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import Polygon

from app.core.exceptions import InvalidInputError
from app.schemas.cloud import PointCloud, ScalarField, Window
from app.schemas.coarse import (
    ConvergenceReport,
    ConvergenceRow,
    EnergyDifferenceReport,
    EnergyDifferenceRow,
    ReferenceFunction,
    SimpleFunction,
    SquarePartition,
)
from app.schemas.energy import EnergySpec
from app.schemas.geometry import VoronoiDiagram
from app.schemas.grid import RegularGrid
from app.services.energy_service import EnergyService
from app.services.geometry_service import GeometryService

logger = logging.getLogger(__name__)

# Symmetric 6-point triangle rule, exact for polynomials of degree 4.
QUADRATURE_DEGREE = 4
_TRI_A, _TRI_WA = 0.445948490915965, 0.223381589678011
_TRI_B, _TRI_WB = 0.091576213509771, 0.109951743655322
_TRI_BARY = np.array([
    [_TRI_A, _TRI_A, 1 - 2 * _TRI_A],
    [_TRI_A, 1 - 2 * _TRI_A, _TRI_A],
    [1 - 2 * _TRI_A, _TRI_A, _TRI_A],
    [_TRI_B, _TRI_B, 1 - 2 * _TRI_B],
    [_TRI_B, 1 - 2 * _TRI_B, _TRI_B],
    [1 - 2 * _TRI_B, _TRI_B, _TRI_B],
])
_TRI_WEIGHTS = np.array([_TRI_WA] * 3 + [_TRI_WB] * 3)


class PiecewiseConstantExtension:
    """û(x) = u(π_η(x)); evaluation by nearest-point location inside the clip window."""

    def __init__(self, u: ScalarField, diagram: VoronoiDiagram):
        self.cloud: PointCloud = u.cloud
        self.diagram = diagram
        self.values = u.values

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        clip = self.diagram.clip
        inside = clip.contains(pts, tol=1e-12 * max(1.0, clip.width, clip.height))
        if not inside.all():
            bad = pts[~inside][0]
            raise InvalidInputError(f"query point ({bad[0]:g}, {bad[1]:g}) lies outside the clip window")
        return self.values[GeometryService.nearest_point(self.cloud, pts)]

    def cell_integral(self, pos: int) -> float:
        return float(self.values[pos] * self.diagram.area[pos])

    def l2_squared(self, positions: Optional[Sequence[int]] = None) -> float:
        """‖û‖² over the union of the cells at ``positions`` (all cells by default)."""
        pos = np.arange(len(self.values)) if positions is None else np.asarray(positions, dtype=np.int64)
        return float(np.sum(self.values[pos] ** 2 * self.diagram.area[pos]))


def _fan_triangles(poly: Polygon) -> np.ndarray:
    """Triangles (n, 3, 2) of a convex polygon fanned from its centroid."""
    v = np.asarray(poly.exterior.coords)[:-1]
    if len(v) < 3:
        return np.zeros((0, 3, 2))
    c = np.array(poly.centroid.coords[0])
    return np.stack([np.broadcast_to(c, v.shape), v, np.roll(v, -1, axis=0)], axis=1)


def _polygon_parts(geom):
    if geom.is_empty:
        return []
    if geom.geom_type == "Polygon":
        return [geom]
    return [g for g in getattr(geom, "geoms", []) if g.geom_type == "Polygon" and not g.is_empty]


class CoarseGrainService:

    @staticmethod
    def square_partition(domain: Window, t: float) -> SquarePartition:
        """𝓘_t(A) = {J ∈ tℤ² : Q_t(J) meets the interior of A}; needs a square, axis-aligned A."""
        if not t > 0:
            raise InvalidInputError(f"t must be > 0, got {t}")
        if domain.angle != 0.0 or not math.isclose(domain.width, domain.height, rel_tol=1e-12):
            raise InvalidInputError("the square partition needs an axis-aligned square domain")
        s = domain.width
        lows, highs = [], []
        for c in domain.center:
            lo = (c - (s + t) / 2) / t
            hi = (c + (s + t) / 2) / t
            lows.append(math.floor(lo + 1e-9) + 1)
            highs.append(math.ceil(hi - 1e-9) - 1)
        kx, ky = highs[0] - lows[0] + 1, highs[1] - lows[1] + 1
        if kx != ky or kx < 1:
            raise InvalidInputError(f"index set is not square ({kx}x{ky}); shift the domain")
        center = (t * (lows[0] + highs[0]) / 2, t * (lows[1] + highs[1]) / 2)
        working = Window.square(kx * t, center)
        return SquarePartition(t=t, k_t=kx, domain=domain, working=working)

    @staticmethod
    def grid_partition(grid: RegularGrid) -> SquarePartition:
        return SquarePartition(t=grid.t, k_t=grid.k_t, domain=grid.domain, working=grid.working)

    @staticmethod
    def grid_average(u: ScalarField, grid: RegularGrid, t: Optional[float] = None) -> SimpleFunction:
        """T^G(u): per-square averages of u over the grid points."""
        if t is not None and not math.isclose(t, grid.t, rel_tol=1e-12):
            raise InvalidInputError(f"t={t} does not match the grid mesoscale {grid.t}")
        partition = CoarseGrainService.grid_partition(grid)
        k = partition.k_t
        pos = u.cloud.index_of(grid.point_ids())
        rows, cols = partition.locate(u.cloud.points[pos])
        keep = rows >= 0
        sums = np.zeros((k, k))
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(sums, (rows[keep], cols[keep]), u.values[pos[keep]])
        np.add.at(counts, (rows[keep], cols[keep]), 1)
        flags = counts == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            coeffs = np.where(flags, np.nan, sums / np.maximum(counts, 1))
        sf = SimpleFunction(t=grid.t, k_t=k, origin=tuple(partition.origin), coefficients=coeffs,
                            counts=counts, flags=flags)
        if flags.any():
            empty = [(r.row, r.column) for r in sf.records() if r.flagged]
            logger.warning(f"⚠️ {len(empty)} grid squares hold no grid point and are flagged: {empty}")
        return sf

    @staticmethod
    def pc_extension(u: ScalarField, diagram: VoronoiDiagram) -> PiecewiseConstantExtension:
        if len(diagram) != len(u.cloud) or not np.array_equal(diagram.ids, u.cloud.ids):
            raise InvalidInputError("diagram was not built on the field's cloud")
        return PiecewiseConstantExtension(u, diagram)

    @staticmethod
    def grid_l2_distance(u: ScalarField, grid: RegularGrid, w: Callable[[np.ndarray], np.ndarray],
                         region: Optional[Window] = None, diagram: Optional[VoronoiDiagram] = None) -> float:
        """
        ∫ |û - w|² over the Voronoi cells of the grid points intersected with the region.
        Cells are fanned into triangles and integrated with a degree-4 rule, exact
        for polynomial w of degree <= 2.
        """
        region = region or grid.domain
        if diagram is None:
            diagram = GeometryService.voronoi_diagram(u.cloud)
        pos = u.cloud.index_of(grid.point_ids())
        if not len(pos):
            return 0.0
        cells = np.array([Polygon(diagram.cells[p]) for p in pos], dtype=object)
        clipped = shapely.intersection(cells, region.polygon())

        tris, vals = [], []
        for p, geom in zip(pos, clipped):
            for part in _polygon_parts(geom):
                t = _fan_triangles(part)
                tris.append(t)
                vals.append(np.full(len(t), u.values[p]))
        if not tris:
            return 0.0
        tri = np.concatenate(tris)
        val = np.concatenate(vals)
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        qp = np.einsum("qk,nkd->nqd", _TRI_BARY, tri)
        wq = np.asarray(w(qp.reshape(-1, 2)), dtype=float).reshape(len(tri), len(_TRI_WEIGHTS))
        integrand = (val[:, None] - wq) ** 2
        return float(np.sum(area * (integrand @ _TRI_WEIGHTS)))

    @staticmethod
    def _same_partition(a: RegularGrid, b: RegularGrid) -> None:
        same = (math.isclose(a.t, b.t, rel_tol=1e-12) and a.k_t == b.k_t
                and np.allclose(a.working.center, b.working.center, atol=1e-12))
        if not same:
            raise InvalidInputError("grids are built on different square partitions")

    @staticmethod
    def grid_independence_gap(u: ScalarField, grid_a: RegularGrid, grid_b: RegularGrid,
                              t: Optional[float] = None) -> float:
        """t² Σ |T^{G_A}(u) - T^{G_B}(u)|² over the squares unflagged in both grids."""
        CoarseGrainService._same_partition(grid_a, grid_b)
        fa = CoarseGrainService.grid_average(u, grid_a, t)
        fb = CoarseGrainService.grid_average(u, grid_b, t)
        valid = ~(fa.flags | fb.flags)
        skipped = float((~valid).sum()) * grid_a.t ** 2
        if skipped:
            logger.warning(f"⚠️ Independence gap skips a measure of {skipped:g} in flagged squares")
        diff = fa.coefficients[valid] - fb.coefficients[valid]
        return float(grid_a.t ** 2 * np.sum(diff * diff))

    @staticmethod
    def square_means(w: Callable[[np.ndarray], np.ndarray], partition: SquarePartition, order: int = 3) -> np.ndarray:
        """u^t: per-square means of w by tensor Gauss-Legendre quadrature."""
        nodes, weights = np.polynomial.legendre.leggauss(order)
        gx, gy = np.meshgrid(nodes, nodes)
        gw = np.outer(weights, weights).ravel() / 4.0
        offsets = np.column_stack([gx.ravel(), gy.ravel()]) * partition.t / 2
        centers = partition.centers().reshape(-1, 2)
        pts = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        vals = np.asarray(w(pts), dtype=float).reshape(len(centers), len(gw))
        return (vals @ gw).reshape(partition.k_t, partition.k_t)

    @staticmethod
    def convergence_report(sequence: Sequence[Tuple], reference: ReferenceFunction,
                           sampling_plan: str = "") -> ConvergenceReport:
        """
        One row per (ε, t, u, grid[, diagram]) entry: the grid-restricted L² distance
        to the reference and ‖T^G(u) - u^t‖² over the unflagged squares.
        """
        report = ConvergenceReport(reference=reference.label, quadrature_degree=QUADRATURE_DEGREE,
                                   sampling_plan=sampling_plan)
        for entry in sequence:
            eps, t, field, grid = entry[:4]
            diagram = entry[4] if len(entry) > 4 else None
            l2 = CoarseGrainService.grid_l2_distance(field, grid, reference, grid.domain, diagram)
            sf = CoarseGrainService.grid_average(field, grid, t)
            ut = CoarseGrainService.square_means(reference, CoarseGrainService.grid_partition(grid))
            valid = ~sf.flags
            diff = sf.coefficients[valid] - ut[valid]
            report.rows.append(ConvergenceRow(
                eps=eps, t=t, k_t=grid.k_t, grid_points=len(grid.point_ids()), l2_distance=l2,
                tg_distance=float(t ** 2 * np.sum(diff * diff)), flagged_squares=int(sf.flags.sum()),
                skipped_measure=sf.flagged_measure,
            ))
            logger.info(f"📉 ε={eps:g} t={t:g}: L² distance {l2:.3e}")
        return report

    @staticmethod
    def energy_difference_constants(u: ScalarField, grid: RegularGrid, t: float, lam: float,
                                    eps: float) -> EnergyDifferenceReport:
        """|Δ average|² / F_ε(u; Q_{i,j} ∪ Q_{i,j+1}) for horizontally adjacent squares."""
        sf = CoarseGrainService.grid_average(u, grid, t)
        partition = CoarseGrainService.grid_partition(grid)
        index = GeometryService.build_neighbor_index(u.cloud, lam * eps)
        report = EnergyDifferenceReport()
        for i in range(grid.k_t):
            for j in range(grid.k_t - 1):
                if sf.flags[i, j] or sf.flags[i, j + 1]:
                    continue
                left, right = partition.square(i, j), partition.square(i, j + 1)
                pair = Window(center=tuple((np.asarray(left.center) + np.asarray(right.center)) / 2),
                              width=2 * grid.t, height=grid.t)
                energy = EnergyService.dirichlet_energy(u, EnergySpec(radius=lam * eps, region=pair), index=index)
                delta_sq = float((sf.coefficients[i, j] - sf.coefficients[i, j + 1]) ** 2)
                if energy > 0:
                    ratio = delta_sq / energy
                else:
                    ratio = math.nan if delta_sq == 0 else math.inf
                report.rows.append(EnergyDifferenceRow(row=i, column=j, delta_sq=delta_sq, energy=energy,
                                                       ratio=ratio))
        finite = [r.ratio for r in report.rows if math.isfinite(r.ratio)]
        report.constant = max(finite) if finite else math.nan
        return report
