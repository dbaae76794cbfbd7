import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from app.core.config import settings
from app.core.exceptions import InvalidInputError, PaddingError, PathConstructionError
from app.schemas.cloud import PointCloud, Window
from app.schemas.coarse import SquarePartition
from app.schemas.geometry import RegularMask, VoronoiDiagram
from app.schemas.grid import (
    AssemblyFailure,
    BlockField,
    GridAssembly,
    GridValidation,
    Orientation,
    PointPath,
    PropertyCheck,
    RegularGrid,
)
from app.services.coarse_service import CoarseGrainService
from app.services.geometry_service import GeometryService, pair_distance
from app.services.percolation_service import PercolationService, cells_meeting, diagram_positions

logger = logging.getLogger(__name__)

_MAX_WITNESSES = 20


def family_rectangle(partition: SquarePartition, orientation: Orientation, index: int) -> Window:
    x0, y0, x1, y1 = partition.working.bounds
    t = partition.t
    if orientation == "h":
        return Window(center=((x0 + x1) / 2, y0 + (index + 0.5) * t), width=x1 - x0, height=t)
    return Window(center=(x0 + (index + 0.5) * t, (y0 + y1) / 2), width=t, height=y1 - y0)


def junction_rectangles(partition: SquarePartition, orientation: Orientation,
                        index: int) -> Tuple[List[Window], List[Window]]:
    """
    Staircase cover of a strip: 2k-1 half-width pieces of length t, stepped by t/2
    and alternating between the two halves, and the 2k-2 full-width bands where
    consecutive pieces overlap.
    """
    strip = family_rectangle(partition, orientation, index)
    x0, y0, _, _ = strip.bounds
    t, k = partition.t, partition.k_t
    pieces, bands = [], []
    for s in range(2 * k - 1):
        start, half = s * t / 2, (s % 2) * t / 2
        if orientation == "v":
            pieces.append(Window(center=(x0 + half + t / 4, y0 + start + t / 2), width=t / 2, height=t))
        else:
            pieces.append(Window(center=(x0 + start + t / 2, y0 + half + t / 4), width=t, height=t / 2))
    for s in range(2 * k - 2):
        start = (s + 1) * t / 2
        if orientation == "v":
            bands.append(Window(center=(x0 + t / 2, y0 + start + t / 4), width=t, height=t / 2))
        else:
            bands.append(Window(center=(x0 + start + t / 4, y0 + t / 2), width=t / 2, height=t))
    return pieces, bands


def junction_pairs(count: int, rising: bool) -> List[int]:
    """Connector for each of ``count`` paths ordered across the strip, so that joined paths never cross."""
    return list(range(count - 1, -1, -1)) if rising else list(range(count))


def _overlap(a: Window, b: Window) -> Window:
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    x0, y0, x1, y1 = max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1)
    return Window(center=((x0 + x1) / 2, (y0 + y1) / 2), width=x1 - x0, height=y1 - y0)


def _mean_coordinate(cloud: PointCloud, path: PointPath, axis: int) -> float:
    return float(cloud.points[cloud.index_of(path.ids), axis].mean())


def square_lengths(partition: SquarePartition, cloud: PointCloud, path: PointPath,
                   orientation: Orientation, index: int) -> np.ndarray:
    """ℓ(path ∩ Q) for the k_t squares of the path's rectangle, in rectangle order."""
    rows, cols = partition.locate(cloud.points[cloud.index_of(path.ids)])
    along = cols if orientation == "h" else rows
    across = rows if orientation == "h" else cols
    keep = (across == index) & (along >= 0)
    return np.bincount(along[keep], minlength=partition.k_t)


def path_distance(cloud: PointCloud, a: PointPath, b: PointPath) -> float:
    pa = cloud.points[cloud.index_of(a.ids)]
    pb = cloud.points[cloud.index_of(b.ids)]
    d, _ = cKDTree(pa).query(pb, k=1)
    return float(np.min(d))


class GridService:

    # --- Assembly ---
    @staticmethod
    def _crossing_paths(field: BlockField, cloud: PointCloud, diagram: VoronoiDiagram, mask: RegularMask,
                        rect: Window, orientation: Orientation, strategy: str,
                        tag: Dict) -> Tuple[List[PointPath], List[Dict]]:
        crossings = PercolationService.find_crossings(field, rect, orientation, strategy=strategy)
        paths, failures = [], []
        for bp in crossings:
            try:
                paths.append(PercolationService.blocks_to_point_path(bp, field, cloud, diagram, mask, rect))
            except PathConstructionError as e:
                failures.append({**tag, "reason": e.message, "point_id": e.point_id})
        return paths, failures

    @staticmethod
    def _family(field: BlockField, cloud: PointCloud, diagram: VoronoiDiagram, mask: RegularMask,
                partition: SquarePartition, orientation: Orientation, index: int,
                strategy: str) -> Tuple[List[PointPath], List[Dict]]:
        rect = family_rectangle(partition, orientation, index)
        return GridService._crossing_paths(field, cloud, diagram, mask, rect, orientation, strategy,
                                           {"orientation": orientation, "rectangle": index})

    @staticmethod
    def _junction_family(field: BlockField, cloud: PointCloud, diagram: VoronoiDiagram, mask: RegularMask,
                         partition: SquarePartition, orientation: Orientation, index: int,
                         strategy: str) -> Tuple[List[PointPath], List[Dict]]:
        """Crossings of the staircase pieces of a strip, joined through the bands where they overlap."""
        strip = family_rectangle(partition, orientation, index)
        pieces, bands = junction_rectangles(partition, orientation, index)
        transversal: Orientation = "h" if orientation == "v" else "v"
        along, across = (1, 0) if orientation == "v" else (0, 1)
        tag = {"orientation": orientation, "rectangle": index}
        failures: List[Dict] = []

        piece_paths = []
        for s, piece in enumerate(pieces):
            paths, lost = GridService._crossing_paths(field, cloud, diagram, mask, piece, orientation, strategy,
                                                      {**tag, "piece": s})
            piece_paths.append(sorted(paths, key=lambda p: _mean_coordinate(cloud, p, across)))
            failures += lost
        band_paths = []
        for s, band in enumerate(bands):
            paths, lost = GridService._crossing_paths(field, cloud, diagram, mask, band, transversal, strategy,
                                                      {**tag, "band": s})
            band_paths.append(sorted(paths, key=lambda p: _mean_coordinate(cloud, p, along)))
            failures += lost

        m = min(len(p) for p in piece_paths + band_paths)
        chain = piece_paths[0][:m]
        for s, band in enumerate(bands):
            rect, rect_tilde = _overlap(pieces[s], band), _overlap(pieces[s + 1], band)
            rising = rect_tilde.center[across] > rect.center[across]
            n = len(chain)
            following, connectors = piece_paths[s + 1][:n], band_paths[s][:n]
            joined = []
            for j, c in enumerate(junction_pairs(n, rising)):
                try:
                    joined.append(PercolationService.join_paths(chain[j], connectors[c], following[j], rect,
                                                                rect_tilde, cloud, diagram, mask))
                except PathConstructionError as e:
                    failures.append({**tag, "band": s, "reason": e.message, "point_id": e.point_id})
            chain = joined
        return [PointPath(ids=p.ids, rect=strip, orientation=orientation) for p in chain], failures

    @staticmethod
    def assemble_grid(cloud: PointCloud, eps: float, t: float, alpha: float, lam: float,
                      block_factor: Optional[int] = None, upsilon: float = 100.0,
                      domain: Optional[Window] = None, diagram: Optional[VoronoiDiagram] = None,
                      mask: Optional[RegularMask] = None, strategy: str = "greedy",
                      threads: Optional[int] = None, construction: str = "strips") -> GridAssembly:
        """
        Regular t-grid for η_ε on the square partition of ``domain``.

        Blocks of side Λλε tile the working square from its lower-left corner. With
        ``construction="strips"`` each horizontal/vertical rectangle gets its disjoint
        good-block crossings turned into point paths; with ``"junction"`` the
        crossings of half-width staircase pieces are joined through the overlap
        bands. Paths are then pruned: (f) neighborhoods, steps longer than λε,
        per-square lengths within [t/(Υε), Υt/ε], 3λε separation kept from the
        bottom (left), a common count M trimmed to ⌊Υt/ε⌋.
        """
        if not (eps > 0 and t > 0 and alpha > 0 and lam > 0 and upsilon >= 1):
            raise InvalidInputError("ε, t, α, λ must be positive and Υ >= 1")
        if construction not in ("strips", "junction"):
            raise InvalidInputError(f"unknown grid construction {construction!r}")
        block_factor = block_factor or settings.BLOCK_FACTOR
        domain = domain or Window.unit()
        partition = CoarseGrainService.square_partition(domain, t)
        if not cloud.window.contains_enlargement(partition.working, 0.0):
            raise PaddingError("cloud window does not cover the working square "
                               f"Q_{partition.working.width:g}")
        if diagram is None:
            diagram = GeometryService.voronoi_diagram(cloud)
        if mask is None:
            mask = GeometryService.regular_subcluster(cloud, diagram, alpha, lam, scale=eps)

        x0, y0, _, _ = partition.working.bounds
        field = PercolationService.block_field(cloud, alpha, lam, block_factor, partition.working, scale=eps,
                                               side=block_factor * lam * eps, origin=(x0, y0))
        k = partition.k_t
        jobs = [("h", i) for i in range(k)] + [("v", j) for j in range(k)]
        build = GridService._junction_family if construction == "junction" else GridService._family
        workers = threads or settings.HOMOG_THREADS
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda job: build(field, cloud, diagram, mask, partition, job[0], job[1], strategy),
                jobs,
            ))

        families: Dict[Orientation, List[List[PointPath]]] = {"h": [], "v": []}
        where: List[Dict] = []
        for (o, _), (paths, failures) in zip(jobs, results):
            families[o].append(paths)
            where += failures
        discarded = {"conversion": len(where), "neighborhood": 0, "step": 0, "length": 0, "separation": 0,
                     "count": 0}

        lo, hi = t / (upsilon * eps), upsilon * t / eps
        ball = GeometryService.ball_counts(cloud, lam * eps)
        tree = cKDTree(cloud.points)
        for o in ("h", "v"):
            for index, fam in enumerate(families[o]):
                kept = []
                for path in fam:
                    if not GridService._neighborhood_ok(cloud, tree, ball, path, alpha, lam, eps):
                        discarded["neighborhood"] += 1
                        continue
                    if GridService._longest_step(cloud, path) > lam * eps:
                        discarded["step"] += 1
                        continue
                    lengths = square_lengths(partition, cloud, path, o, index)
                    if lengths.min() < lo or lengths.max() > hi:
                        discarded["length"] += 1
                        continue
                    kept.append(path)
                fam[:] = kept
            discarded["separation"] += GridService._separate(cloud, families[o], 3 * lam * eps)

        counts = [len(f) for o in ("h", "v") for f in families[o]]
        M = min(counts) if counts else 0
        if M == 0:
            empty = [{"orientation": o, "rectangle": i} for o in ("h", "v")
                     for i, f in enumerate(families[o]) if not f]
            logger.error(f"❌ Grid assembly failed: {len(empty)} rectangles without admissible paths")
            return GridAssembly(failure=AssemblyFailure(reason="M=0: no admissible path in some rectangle",
                                                        where=empty + where), discarded=discarded)
        M = min(M, math.floor(hi))
        if M < lo:
            logger.error(f"❌ Grid assembly failed: M={M} below t/(Υε)={lo:g}")
            return GridAssembly(failure=AssemblyFailure(reason=f"M={M} below t/(Υε)={lo:g}", where=where),
                                discarded=discarded)
        for o in ("h", "v"):
            for fam in families[o]:
                discarded["count"] += len(fam) - M
                del fam[M:]

        grid = RegularGrid(eps=eps, t=t, lam=lam, alpha=alpha, upsilon=upsilon, k_t=k, domain=domain,
                           working=partition.working, horizontal=families["h"], vertical=families["v"])
        logger.info(f"✅ Assembled regular grid ({construction}): k_t={k}, M={M}, discarded={discarded}")
        return GridAssembly(grid=grid, discarded=discarded)

    @staticmethod
    def _neighborhood_ok(cloud: PointCloud, tree: cKDTree, ball: np.ndarray, path: PointPath,
                         alpha: float, lam: float, eps: float) -> bool:
        pts = cloud.points[cloud.index_of(path.ids)]
        near = tree.query_ball_point(pts, r=3 * lam * eps)
        near = np.unique(np.concatenate([np.asarray(n, dtype=np.int64) for n in near]))
        return bool(np.all(ball[near] <= lam ** 2 / alpha))

    @staticmethod
    def _longest_step(cloud: PointCloud, path: PointPath) -> float:
        pts = cloud.points[cloud.index_of(path.ids)]
        return float(pair_distance(pts[1:], pts[:-1]).max()) if len(pts) > 1 else 0.0

    @staticmethod
    def _separate(cloud: PointCloud, families: List[List[PointPath]], gap: float) -> int:
        """Keep paths from the first rectangle upwards whose distance to every kept path is >= gap."""
        kept_pts: List[np.ndarray] = []
        dropped = 0
        for fam in families:
            kept = []
            for path in fam:
                pts = cloud.points[cloud.index_of(path.ids)]
                if kept_pts:
                    d, _ = cKDTree(pts).query(np.vstack(kept_pts), k=1)
                    if d.min() < gap:
                        dropped += 1
                        continue
                kept.append(path)
                kept_pts.append(pts)
            fam[:] = kept
        return dropped

    # --- Validation ---
    @staticmethod
    def validate_grid(grid: RegularGrid, cloud: PointCloud, diagram: VoronoiDiagram,
                      mask: RegularMask) -> GridValidation:
        """Check properties (a)-(g) of a regular t-grid, each with witnesses."""
        eps, t, lam, alpha, ups = grid.eps, grid.t, grid.lam, grid.alpha, grid.upsilon
        partition = CoarseGrainService.grid_partition(grid)
        paths = grid.paths()
        for _, _, _, p in paths:
            missing = set(p.ids) - set(cloud.ids.tolist())
            if missing:
                raise InvalidInputError(f"grid references ids not in the cloud: {sorted(missing)[:5]}")
        checks: Dict[str, PropertyCheck] = {}

        # (a) regular points
        wit = []
        for o, r, m, p in paths:
            pos = cloud.index_of(p.ids)
            for pid in np.asarray(p.ids)[~mask.mask[pos]]:
                wit.append({"orientation": o, "rectangle": r, "path": m, "point_id": int(pid)})
        checks["a"] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                    detail="every path point lies in the regular sub-cluster")

        # (b), (c) side-to-side crossings strictly inside the rectangle
        for key, orient, sides in (("b", "h", ("left", "right")), ("c", "v", ("bottom", "top"))):
            wit = []
            for o, r, m, p in grid.paths(orient):
                rect = family_rectangle(partition, o, r)
                pos = diagram_positions(diagram, p.ids)
                outside = ~rect.contains(diagram.points[pos], closed=False)
                if outside.any():
                    wit.append({"rectangle": r, "path": m, "point_id": int(np.asarray(p.ids)[outside][0]),
                                "reason": "outside the open rectangle"})
                    continue
                first = cells_meeting(diagram, pos[:1], rect, sides[0])
                last = cells_meeting(diagram, pos[-1:], rect, sides[1])
                if not (first.all() and last.all()):
                    wit.append({"rectangle": r, "path": m, "reason": f"does not join the {sides[0]} and "
                                                                      f"{sides[1]} sides"})
            checks[key] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                        detail=f"paths connect the {sides[0]}/{sides[1]} sides")

        # (d) per-square lengths and the common count M
        lo, hi = t / (ups * eps), ups * t / eps
        wit = []
        worst_len = 1.0
        for o, r, m, p in paths:
            lengths = square_lengths(partition, cloud, p, o, r)
            for sq, ell in enumerate(lengths):
                ratio = math.inf if ell == 0 else max(ell * eps / t, t / (ell * eps))
                worst_len = max(worst_len, ratio)
                if not lo <= ell <= hi:
                    wit.append({"orientation": o, "rectangle": r, "path": m, "square": sq, "length": int(ell)})
        sizes = {(o, i): len(f) for o, fams in (("h", grid.horizontal), ("v", grid.vertical))
                 for i, f in enumerate(fams)}
        M = max(sizes.values()) if sizes else 0
        for (o, i), n in sizes.items():
            if n != M:
                wit.append({"orientation": o, "rectangle": i, "count": n, "expected": M})
        if not lo <= grid.M <= hi:
            wit.append({"count": grid.M, "bounds": [lo, hi]})
        if len(sizes) != 2 * grid.k_t:
            wit.append({"families": len(sizes), "expected": 2 * grid.k_t})
        worst_count = math.inf if grid.M == 0 else max(grid.M * eps / t, t / (grid.M * eps))
        checks["d"] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                    detail=f"lengths and M within [{lo:g}, {hi:g}]")

        # (e) separation of same-orientation paths
        gap = 3 * lam * eps
        wit = []
        for orient in ("h", "v"):
            fam = grid.paths(orient)
            for a in range(len(fam)):
                for b in range(a + 1, len(fam)):
                    d = path_distance(cloud, fam[a][3], fam[b][3])
                    if d < gap:
                        wit.append({"orientation": orient, "first": [fam[a][1], fam[a][2]],
                                    "second": [fam[b][1], fam[b][2]], "distance": d})
        checks["e"] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                    detail=f"same-orientation paths at least {gap:g} apart")

        # (f) ball counts near the paths
        ball = GeometryService.ball_counts(cloud, lam * eps)
        tree = cKDTree(cloud.points)
        wit = []
        for o, r, m, p in paths:
            near = tree.query_ball_point(cloud.points[cloud.index_of(p.ids)], r=gap)
            near = np.unique(np.concatenate([np.asarray(n, dtype=np.int64) for n in near]))
            for k in near[ball[near] > lam ** 2 / alpha]:
                wit.append({"orientation": o, "rectangle": r, "path": m, "point_id": int(cloud.ids[k]),
                            "count": int(ball[k])})
        checks["f"] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                    detail=f"η_ε(B_λε(x)) <= {lam ** 2 / alpha:g} within {gap:g} of a path")

        # (g) consecutive points are nearest neighbors at most λε apart
        wit = []
        for o, r, m, p in paths:
            pos = diagram_positions(diagram, p.ids)
            steps = pair_distance(diagram.points[pos[1:]], diagram.points[pos[:-1]])
            for s in np.nonzero(steps > lam * eps)[0]:
                wit.append({"orientation": o, "rectangle": r, "path": m,
                            "pair": [int(p.ids[s]), int(p.ids[s + 1])], "distance": float(steps[s])})
            for s in range(len(pos) - 1):
                if not diagram.are_neighbors(int(pos[s]), int(pos[s + 1])):
                    wit.append({"orientation": o, "rectangle": r, "path": m,
                                "pair": [int(p.ids[s]), int(p.ids[s + 1])], "reason": "not nearest neighbors"})
        checks["g"] = PropertyCheck(passed=not wit, witnesses=wit[:_MAX_WITNESSES],
                                    detail=f"consecutive points are neighbors within {lam * eps:g}")

        report = GridValidation(checks=checks, upsilon_length=worst_len, upsilon_count=worst_count)
        if report.passed:
            logger.info("✅ Grid satisfies (a)-(g)")
        else:
            logger.warning(f"⚠️ Grid fails properties {report.failed()}")
        return report
