import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.sparse import coo_matrix, diags
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg
from scipy.spatial import ConvexHull, QhullError
from shapely import contains_xy
from shapely.geometry import Point, Polygon

from app.core.config import settings
from app.core.exceptions import (
    HomogenizationError, InvalidInputError, PaddingError, SolverError, StitchingError
)
from app.core.rng import RandomStream
from app.schemas.cell import (
    CellProblemSolution, ClampPartition, QuadraticSystem, XiAggregate, XiEstimate, XiPlan, XiRow
)
from app.schemas.cloud import PointCloud, SamplingSpec, ScalarField, Window
from app.schemas.energy import EnergySpec
from app.schemas.geometry import NeighborIndex
from app.services.energy_service import EnergyService
from app.services.geometry_service import GeometryService
from app.services.sampling_service import SamplingService

logger = logging.getLogger(__name__)

XI_CSV_HEADER = ["T", "seed", "xi_x", "xi_y", "m", "m_normalized", "residual", "iters"]


def _hull_centroid(points: np.ndarray) -> np.ndarray:
    if len(points) >= 3:
        try:
            hull = ConvexHull(points)
            v = points[hull.vertices]
            x, y = v[:, 0], v[:, 1]
            cross = x * np.roll(y, -1) - np.roll(x, -1) * y
            area = cross.sum() / 2.0
            if abs(area) > 0:
                cx = ((x + np.roll(x, -1)) * cross).sum() / (6.0 * area)
                cy = ((y + np.roll(y, -1)) * cross).sum() / (6.0 * area)
                return np.array([cx, cy])
        except QhullError:
            pass
    return points.mean(axis=0)


class CellProblemService:

    # --- Assembly ---
    @staticmethod
    def clamp_partition(cloud: PointCloud, region: Window, lam: float, xi: Sequence[float],
                        layer: Optional[float] = None) -> ClampPartition:
        """
        free: x in A with dist(x, ∂A) > layer (default 2λ);
        clamped: every other point of (A)_λ, valued ξ·x.
        """
        if not lam > 0:
            raise InvalidInputError(f"lambda must be > 0, got {lam}")
        layer = 2.0 * lam if layer is None else float(layer)
        if layer < 2.0 * lam:
            raise InvalidInputError("the clamped layer cannot be thinner than 2λ")
        EnergyService.check_padding(cloud, region, lam)
        xi_arr = np.asarray(xi, dtype=float)
        if not len(cloud):
            empty = np.zeros(0, dtype=np.int64)
            return ClampPartition(region=region, lam=lam, layer=layer, xi=tuple(xi_arr), free=empty,
                                  clamped=empty, clamp_values=np.zeros(0))
        pts = cloud.points
        relevant = region.distance_to(pts) < lam
        inside = region.contains(pts)
        free = inside & (region.distance_to_boundary(pts) > layer)
        clamped = relevant & ~free
        clamped_pos = np.nonzero(clamped)[0]
        return ClampPartition(
            region=region, lam=lam, layer=layer, xi=(float(xi_arr[0]), float(xi_arr[1])),
            free=np.nonzero(free)[0], clamped=clamped_pos, clamp_values=pts[clamped_pos] @ xi_arr,
        )

    @staticmethod
    def assemble_quadratic(cloud: PointCloud, index: NeighborIndex, partition: ClampPartition) -> QuadraticSystem:
        """Normal-equation form of the ordered-pair energy on the region."""
        if index.radius != partition.lam:
            raise InvalidInputError(
                f"neighbor index radius {index.radius} differs from λ={partition.lam}"
            )
        n = len(cloud)
        nf = partition.n_free
        var = np.full(n, -1, dtype=np.int64)
        var[partition.free] = np.arange(nf)
        clamp = np.full(n, np.nan)
        clamp[partition.clamped] = partition.clamp_values

        rows, cols = index.pairs()
        in_a = partition.region.contains(cloud.points) if n else np.zeros(0, dtype=bool)
        keep = in_a[rows]
        i, j = rows[keep], cols[keep]
        vi, vj = var[i], var[j]
        if np.any(np.isnan(clamp[i][vi < 0])) or np.any(np.isnan(clamp[j][vj < 0])):
            raise InvalidInputError("partition does not cover every interacting point")

        ff = (vi >= 0) & (vj >= 0)
        fc = (vi >= 0) & (vj < 0)
        cf = (vi < 0) & (vj >= 0)
        cc = (vi < 0) & (vj < 0)

        a, b = vi[ff], vj[ff]
        r = np.concatenate([a, b, a, b, vi[fc], vj[cf]])
        c = np.concatenate([a, b, b, a, vi[fc], vj[cf]])
        data = np.concatenate([np.ones(len(a)), np.ones(len(a)), -np.ones(len(a)), -np.ones(len(a)),
                               np.ones(int(fc.sum())), np.ones(int(cf.sum()))])
        matrix = coo_matrix((data, (r, c)), shape=(nf, nf)).tocsr()
        matrix.sum_duplicates()

        rhs = np.zeros(nf)
        np.add.at(rhs, vi[fc], clamp[j[fc]])
        np.add.at(rhs, vj[cf], clamp[i[cf]])
        degree = np.zeros(nf, dtype=np.int64)
        np.add.at(degree, vi[fc], 1)
        np.add.at(degree, vj[cf], 1)
        const = float(np.sum(clamp[j[fc]] ** 2) + np.sum(clamp[i[cf]] ** 2)
                      + np.sum((clamp[i[cc]] - clamp[j[cc]]) ** 2))
        return QuadraticSystem(matrix=matrix, rhs=rhs, constant=const, free=partition.free,
                               clamp_degree=degree, region=partition.region, lam=partition.lam,
                               xi=partition.xi)

    # --- Solve ---
    @staticmethod
    def _pcg(matrix, rhs: np.ndarray, x0: np.ndarray, tol: float, max_iter: int) -> Tuple[np.ndarray, float, int]:
        """Jacobi-preconditioned CG; returns (x, true relative residual, iterations)."""
        bnorm = float(np.linalg.norm(rhs))
        diag = matrix.diagonal()
        inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
        precond = LinearOperator(matrix.shape, matvec=lambda v: inv * v, dtype=float)
        counter = {"n": 0}

        def _count(_xk):
            counter["n"] += 1

        x = x0
        residual = np.inf
        # restarts recover from drift between the recursive and the true residual
        for _ in range(3):
            x, _info = cg(matrix, rhs, x0=x, rtol=tol, atol=0.0, M=precond,
                          maxiter=max(max_iter - counter["n"], 1), callback=_count)
            true_res = float(np.linalg.norm(rhs - matrix @ x))
            residual = true_res / bnorm if bnorm > 0 else true_res
            if residual <= tol or counter["n"] >= max_iter:
                break
        return x, residual, counter["n"]

    @staticmethod
    def solve_cell_problem(cloud: PointCloud, region: Window, lam: float, xi: Sequence[float],
                           tol: Optional[float] = None, max_iter: Optional[int] = None,
                           index: Optional[NeighborIndex] = None, layer: Optional[float] = None) -> CellProblemSolution:
        """
        m(ξ; A): minimize the ordered-pair energy on A over fields equal to ξ·x
        on the clamped layer. m is re-evaluated from the returned field.
        """
        started = time.perf_counter()
        tol = settings.SOLVER_TOL if tol is None else tol
        if not tol > 0:
            raise InvalidInputError(f"solver tolerance must be > 0, got {tol}")
        xi_arr = np.asarray(xi, dtype=float)

        partition = CellProblemService.clamp_partition(cloud, region, lam, xi_arr, layer=layer)
        if index is None:
            index = GeometryService.build_neighbor_index(cloud, lam) if len(cloud) else \
                NeighborIndex(radius=lam, cell_size=lam, ids=cloud.ids,
                              indptr=np.zeros(1, dtype=np.int64), indices=np.zeros(0, dtype=np.int64))
        system = CellProblemService.assemble_quadratic(cloud, index, partition)

        nf = partition.n_free
        w = cloud.points[partition.free] @ xi_arr if nf else np.zeros(0)
        isolated = 0
        residual, iterations = 0.0, 0
        if nf:
            ncomp, labels = connected_components(system.matrix, directed=False)
            touched = np.zeros(ncomp, dtype=bool)
            np.logical_or.at(touched, labels, system.clamp_degree > 0)
            active = touched[labels]
            for comp in np.nonzero(~touched)[0]:
                members = labels == comp
                centroid = _hull_centroid(cloud.points[partition.free[members]])
                w[members] = centroid @ xi_arr
                isolated += 1
            if isolated:
                logger.warning(f"⚠️ {isolated} free component(s) without clamped neighbors fixed to ξ·(hull centroid)")

            act = np.nonzero(active)[0]
            if len(act):
                sub = system.matrix[act][:, act]
                # isolated components have no coupling to the active ones
                rhs = system.rhs[act]
                max_iter = max_iter or settings.SOLVER_MAXITER_FACTOR * len(act)
                x, residual, iterations = CellProblemService._pcg(sub, rhs, w[act], tol, max_iter)
                w[act] = x
                if residual > tol:
                    best = ScalarField(cloud=cloud, values=CellProblemService._full_field(cloud, partition, w, xi_arr))
                    logger.error(f"❌ CG stopped at residual {residual:.3e} after {iterations} iterations")
                    raise SolverError(
                        f"conjugate gradients did not reach tol={tol:g} (residual {residual:.3e})",
                        best_iterate=best, residual=residual, iterations=iterations,
                    )

        values = CellProblemService._full_field(cloud, partition, w, xi_arr)
        field = ScalarField(cloud=cloud, values=values)
        m = EnergyService.dirichlet_energy(field, EnergySpec(radius=lam, region=region), index=index)
        elapsed = time.perf_counter() - started
        logger.info(f"🧮 Cell problem: {nf} free / {partition.n_clamped} clamped, m={m:.6g}, "
                    f"{iterations} iterations, {elapsed:.2f}s")
        return CellProblemSolution(
            xi=(float(xi_arr[0]), float(xi_arr[1])), region=region, lam=lam, field=field, m=m,
            quadratic_value=system.value(w), residual=residual, iterations=iterations, wall_time=elapsed,
            n_free=nf, n_clamped=partition.n_clamped, isolated_components=isolated, free=partition.free,
        )

    @staticmethod
    def _full_field(cloud: PointCloud, partition: ClampPartition, w: np.ndarray, xi: np.ndarray) -> np.ndarray:
        values = cloud.points @ xi if len(cloud) else np.zeros(0)
        values = np.array(values, dtype=float)
        values[partition.free] = w
        return values

    @staticmethod
    def affine_upper_bound(cloud: PointCloud, region: Window, lam: float, xi: Sequence[float],
                           index: Optional[NeighborIndex] = None) -> float:
        """F(ξ·x; A), the energy of the affine competitor."""
        field = EnergyService.affine_field(cloud, xi)
        return EnergyService.dirichlet_energy(field, EnergySpec(radius=lam, region=region), index=index)

    @staticmethod
    def lattice_xi(lam: float, spacing: float, xi: Sequence[float]) -> float:
        """
        Closed-form m(ξ;Q_T)/(T²|ξ|²) as T → ∞ on the lattice hℤ²: affine fields are
        discrete-harmonic there, so the value is Σ_{0<|z|<λ} (ξ·z)² / (h²|ξ|²).
        """
        xi = np.asarray(xi, dtype=float)
        n = int(np.ceil(lam / spacing))
        k = np.arange(-n, n + 1) * spacing
        z = np.stack(np.meshgrid(k, k), axis=-1).reshape(-1, 2)
        r = np.hypot(z[:, 0], z[:, 1])
        z = z[(r > 0) & (r < lam)]
        return float(np.sum((z @ xi) ** 2) / (spacing ** 2 * (xi @ xi)))

    # --- Ξ estimation ---
    @staticmethod
    def row_stream(master: RandomStream, seed: int, size: float) -> RandomStream:
        return master.derive(seed).derive(int(round(size * 1e6)))

    @staticmethod
    def realization(plan: XiPlan, size: float, seed: int) -> PointCloud:
        """The cloud shared by every direction of row (T, seed)."""
        stream = CellProblemService.row_stream(RandomStream(seed=plan.master_seed), seed, size)
        if plan.mode == "lattice":
            h = plan.spacing
            pad = h * np.ceil(plan.lam / h)
            return SamplingService.lattice_cloud(Window.square(size + 2 * pad), h, plan.jitter, stream)
        spec = SamplingSpec(window=Window.square(size), intensity=plan.gamma, padding=plan.lam, stream=stream)
        return SamplingService.sample_poisson(spec)

    @staticmethod
    def _evaluate_rows(plan: XiPlan, size: float, seed: int) -> List[XiRow]:
        region = Window.square(size)
        rows = []
        try:
            cloud = CellProblemService.realization(plan, size, seed)
            index = GeometryService.build_neighbor_index(cloud, plan.lam)
        except HomogenizationError as e:
            return [XiRow(T=size, seed=seed, xi_x=d[0], xi_y=d[1], m=float("nan"), m_normalized=float("nan"),
                          residual=float("nan"), iters=0, status="failed", error=e.message)
                    for d in plan.directions]
        for d in plan.directions:
            norm2 = float(d[0] ** 2 + d[1] ** 2)
            scale = size ** 2 * norm2
            try:
                sol = CellProblemService.solve_cell_problem(cloud, region, plan.lam, d, tol=plan.tol, index=index)
                bound = CellProblemService.affine_upper_bound(cloud, region, plan.lam, d, index=index)
                rows.append(XiRow(T=size, seed=seed, xi_x=d[0], xi_y=d[1], m=sol.m, m_normalized=sol.m / scale,
                                  residual=sol.residual, iters=sol.iterations, affine_normalized=bound / scale))
            except SolverError as e:
                logger.error(f"❌ Row T={size} seed={seed} ξ={d} failed: {e.message}")
                rows.append(XiRow(T=size, seed=seed, xi_x=d[0], xi_y=d[1], m=float("nan"),
                                  m_normalized=float("nan"), residual=e.residual, iters=e.iterations,
                                  status="failed", error=e.message))
        return rows

    @staticmethod
    def estimate_xi(plan: XiPlan) -> XiEstimate:
        """
        Normalized cell values m(ξ;Q_T)/(T²|ξ|²) over sizes, seeds and directions,
        with per-size statistics and an affine fit against 1/T on the three largest sizes.
        """
        for size in plan.sizes:
            if not size > 4 * plan.lam:
                raise InvalidInputError(f"T={size} must exceed 4λ={4 * plan.lam}")
        tasks = [(size, seed) for size in plan.sizes for seed in plan.seeds]
        workers = plan.threads or settings.HOMOG_THREADS
        logger.info(f"🚀 Ξ sweep: {len(tasks)} realizations × {len(plan.directions)} directions")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda t: CellProblemService._evaluate_rows(plan, *t), tasks))

        dir_order = {tuple(d): k for k, d in enumerate(plan.directions)}
        rows = sorted((r for chunk in chunks for r in chunk),
                      key=lambda r: (r.T, r.seed, dir_order[(r.xi_x, r.xi_y)]))
        return CellProblemService.summarize_xi(rows, plan)

    @staticmethod
    def summarize_xi(rows: List[XiRow], plan: XiPlan) -> XiEstimate:
        aggregates = []
        for size in sorted(set(r.T for r in rows)):
            good = [r for r in rows if r.T == size and r.ok]
            vals = np.array([r.m_normalized for r in good])
            per_dir = []
            for d in plan.directions:
                dv = [r.m_normalized for r in good if (r.xi_x, r.xi_y) == tuple(d)]
                per_dir.append(float(np.mean(dv)) if dv else float("nan"))
            pd = np.array(per_dir)
            mean = float(vals.mean()) if len(vals) else float("nan")
            spread = float((np.nanmax(pd) - np.nanmin(pd)) / mean) if len(vals) and mean > 0 else float("nan")
            aggregates.append(XiAggregate(
                T=size, n=len(vals), mean=mean,
                std=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                direction_means=per_dir, direction_spread=spread,
            ))

        usable = [a for a in aggregates if a.n > 0]
        fit = usable[-3:]
        slope = float("nan")
        if len(fit) >= 2:
            res = stats.linregress([1.0 / a.T for a in fit], [a.mean for a in fit])
            estimate, uncertainty, slope = float(res.intercept), float(res.intercept_stderr), float(res.slope)
        elif fit:
            estimate = fit[0].mean
            uncertainty = fit[0].std / np.sqrt(fit[0].n)
        else:
            estimate, uncertainty = float("nan"), float("nan")

        failed = sum(1 for r in rows if not r.ok)
        logger.info(f"✅ Ξ ≈ {estimate:.6g} ± {uncertainty:.2g} ({failed} failed rows)")
        return XiEstimate(rows=rows, aggregates=aggregates, xi_estimate=estimate, xi_uncertainty=float(uncertainty),
                          fit_sizes=[a.T for a in fit], fit_slope=slope, failed_rows=failed)

    @staticmethod
    def xi_csv_rows(estimate: XiEstimate):
        for r in estimate.rows:
            yield [r.T, r.seed, r.xi_x, r.xi_y, r.m, r.m_normalized, r.residual, r.iters]

    # --- Recovery fields ---
    @staticmethod
    def interior_squares(region: Polygon, m: int, delta: float):
        """
        Centers J ∈ (1/m)ℤ² of the squares Q_{1/m}(J) inside S at distance >= δ from ∂S,
        and those meeting S otherwise.
        """
        side = 1.0 / m
        xmin, ymin, xmax, ymax = region.bounds
        ks = range(int(np.floor(xmin * m)) - 1, int(np.ceil(xmax * m)) + 2)
        ls = range(int(np.floor(ymin * m)) - 1, int(np.ceil(ymax * m)) + 2)
        inner, outer = [], []
        for k in ks:
            for l in ls:
                sq = Window.square(side, (k * side, l * side))
                poly = sq.polygon()
                if not poly.intersects(region):
                    continue
                corners = sq.corners()
                if region.covers(poly) and min(region.exterior.distance(Point(c))
                                               for c in corners) >= delta:
                    inner.append((k, l))
                else:
                    outer.append((k, l))
        return inner, outer

    @staticmethod
    def stitch_recovery_field(cloud: PointCloud, eps: float, region: Polygon, xi: Sequence[float], m: int,
                              delta: float, lam: float, tol: Optional[float] = None) -> ScalarField:
        """
        ξ·x everywhere except inside Q_{(1-δ)/m}(J) for the well-contained squares J,
        where the cell-problem minimizer at interaction radius λε is used.
        """
        if not 0 < delta < 1:
            raise InvalidInputError(f"delta must lie in (0, 1), got {delta}")
        if m < 1:
            raise InvalidInputError(f"subgrid count must be >= 1, got {m}")
        xi_arr = np.asarray(xi, dtype=float)
        values = np.array(cloud.points @ xi_arr if len(cloud) else np.zeros(0), dtype=float)
        inner, _ = CellProblemService.interior_squares(region, m, delta)
        radius = lam * eps
        index = GeometryService.build_neighbor_index(cloud, radius) if len(cloud) else None
        for k, l in inner:
            sub = Window.square((1.0 - delta) / m, (k / m, l / m))
            if sub.width <= 4 * radius:
                continue
            try:
                sol = CellProblemService.solve_cell_problem(cloud, sub, radius, xi_arr, tol=tol, index=index)
            except HomogenizationError as e:
                raise StitchingError(e.message, square=(k, l))
            values[sol.free] = sol.field.values[sol.free]
        logger.info(f"🧵 Stitched recovery field over {len(inner)} interior squares (m={m}, δ={delta})")
        return ScalarField(cloud=cloud, values=values)

    @staticmethod
    def stitch_piecewise_affine(cloud: PointCloud, eps: float, pieces: Sequence[Tuple[Polygon, Sequence[float], float]],
                                m: int, delta: float, lam: float, tol: Optional[float] = None) -> ScalarField:
        """Recovery field of a continuous piecewise-affine target ξ_S·x + b_S on convex pieces S."""
        if not pieces:
            raise InvalidInputError("at least one piece is required")
        values = np.full(len(cloud), np.nan)
        assigned = np.zeros(len(cloud), dtype=bool)
        for poly, xi_s, b_s in pieces:
            stitched = CellProblemService.stitch_recovery_field(cloud, eps, poly, xi_s, m, delta, lam, tol=tol)
            hit = ~assigned & contains_xy(poly.buffer(settings.GEOMETRY_TOL), cloud.points[:, 0], cloud.points[:, 1])
            values[hit] = stitched.values[hit] + b_s
            assigned |= hit
        if not assigned.all():
            # points outside the union take the affine value of the nearest piece
            for k in np.nonzero(~assigned)[0]:
                p = cloud.points[k]
                dists = [poly.distance(Point(p)) for poly, _, _ in pieces]
                _, xi_s, b_s = pieces[int(np.argmin(dists))]
                values[k] = p @ np.asarray(xi_s, dtype=float) + b_s
        return ScalarField(cloud=cloud, values=values)
