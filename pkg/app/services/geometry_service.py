import logging
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import Voronoi, cKDTree
from scipy.spatial.distance import pdist

from app.core.config import settings
from app.core.exceptions import GeometryError, InvalidInputError
from app.schemas.cloud import PointCloud, Window
from app.schemas.geometry import NeighborIndex, RegularMask, VoronoiDiagram

logger = logging.getLogger(__name__)

_OFFSETS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def pair_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.hypot(d[..., 0], d[..., 1])


def _order_polygon(vertices: np.ndarray, tol: float) -> np.ndarray:
    """Counter-clockwise order with near-duplicate vertices merged."""
    c = vertices.mean(axis=0)
    ang = np.arctan2(vertices[:, 1] - c[1], vertices[:, 0] - c[0])
    v = vertices[np.argsort(ang, kind="stable")]
    keep = [0]
    for k in range(1, len(v)):
        if np.hypot(*(v[k] - v[keep[-1]])) > tol:
            keep.append(k)
    v = v[keep]
    if len(v) > 1 and np.hypot(*(v[-1] - v[0])) <= tol:
        v = v[:-1]
    return v


def polygon_area(v: np.ndarray) -> float:
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip_halfplane(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of a convex polygon with ``normal . p <= offset``."""
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp, fq = normal @ p - offset, normal @ q - offset
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            s = fp / (fp - fq)
            out.append(p + s * (q - p))
    return np.array(out).reshape(-1, 2)


def _clip_to_neighbors(poly: np.ndarray, sites: np.ndarray, k: int, tree: cKDTree) -> np.ndarray:
    """
    Cell of ``sites[k]`` inside ``poly``, clipped by bisectors nearest first.
    Stops once the next site is at least twice the cell's reach from the generator.
    """
    x = sites[k]
    n = len(sites)
    done, want = 0, min(16, n)
    while True:
        dist, idx = tree.query(x, k=want)
        dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
        for d, j in zip(dist[done:], idx[done:]):
            if j == k:
                continue
            reach = float(np.sqrt(((poly - x) ** 2).sum(axis=1)).max()) if len(poly) else 0.0
            if d >= 2 * reach:
                return poly
            y = sites[j]
            poly = _clip_halfplane(poly, y - x, 0.5 * (y @ y - x @ x))
        if want >= n:
            return poly
        done, want = want, min(2 * want, n)


def _edge_distances(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    e = np.roll(v, -1, axis=0) - v
    length = np.hypot(e[:, 0], e[:, 1])
    cross = e[:, 0] * (x[1] - v[:, 1]) - e[:, 1] * (x[0] - v[:, 0])
    return cross / np.where(length > 0, length, 1.0)


class GeometryService:

    # --- Neighbor index ---
    @staticmethod
    def build_neighbor_index(cloud: PointCloud, radius: float) -> NeighborIndex:
        """
        Bucket-grid (cell list) neighbor search with the strict test |x-y| < r.
        Cells have side r, so candidates come from the 3x3 block around a point.
        """
        if not radius > 0:
            raise InvalidInputError(f"neighbor radius must be > 0, got {radius}")
        pts = cloud.points
        n = len(pts)
        if n == 0:
            empty = np.zeros(0, dtype=np.int64)
            return NeighborIndex(radius=radius, cell_size=radius, ids=cloud.ids,
                                 indptr=np.zeros(1, dtype=np.int64), indices=empty)

        lo = pts.min(axis=0)
        cell = np.floor((pts - lo) / radius).astype(np.int64)
        ny = int(cell[:, 1].max()) + 3
        key = (cell[:, 0] + 1) * ny + (cell[:, 1] + 1)
        order = np.argsort(key, kind="stable")
        ukeys, starts, counts = np.unique(key[order], return_index=True, return_counts=True)

        rows, cols = [], []
        for dx, dy in _OFFSETS:
            nkey = (cell[:, 0] + 1 + dx) * ny + (cell[:, 1] + 1 + dy)
            loc = np.searchsorted(ukeys, nkey)
            loc_c = np.minimum(loc, len(ukeys) - 1)
            hit = (loc < len(ukeys)) & (ukeys[loc_c] == nkey)
            src = np.nonzero(hit)[0]
            if not len(src):
                continue
            cnt = counts[loc_c[src]]
            first = starts[loc_c[src]]
            rep_src = np.repeat(src, cnt)
            offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            cand = order[np.repeat(first, cnt) + offs]
            close = (cand != rep_src) & (pair_distance(pts[rep_src], pts[cand]) < radius)
            rows.append(rep_src[close])
            cols.append(cand[close])

        r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        srt = np.lexsort((c, r))
        r, c = r[srt], c[srt]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        return NeighborIndex(radius=float(radius), cell_size=float(radius), ids=cloud.ids,
                             indptr=indptr, indices=c.astype(np.int64))

    @staticmethod
    def ball_counts(cloud: PointCloud, radius: float, points: Optional[np.ndarray] = None) -> np.ndarray:
        """η(B_r(x)) for the open ball; a query point of the cloud counts itself."""
        query = cloud.points if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
        if len(query) == 0:
            return np.zeros(0, dtype=np.int64)
        if len(cloud) == 0:
            return np.zeros(len(query), dtype=np.int64)
        tree = cKDTree(cloud.points)
        return np.asarray(tree.query_ball_point(query, r=np.nextafter(radius, 0), return_length=True),
                          dtype=np.int64)

    # --- Voronoi ---
    @staticmethod
    def voronoi_diagram(cloud: PointCloud, clip: Optional[Window] = None) -> VoronoiDiagram:
        """
        Voronoi cells clipped to ``clip`` (default: the cloud window).
        Cells are computed in the clip frame from the cloud plus its mirror
        images across the four sides, so every cell of a point inside the
        window comes out already clipped.
        """
        clip = clip or cloud.window
        n = len(cloud)
        if n < 1:
            raise GeometryError("Voronoi diagram needs at least one point")
        scale = max(clip.width, clip.height)
        tol = settings.GEOMETRY_TOL * scale
        if not clip.contains(cloud.points, tol=tol).all():
            raise GeometryError("all points must lie inside the clip window")

        local = clip.to_local(cloud.points)
        hw, hh = clip.half
        mirrors = [local]
        for axis, h in ((0, hw), (0, -hw), (1, hh), (1, -hh)):
            m = local.copy()
            m[:, axis] = 2 * h - m[:, axis]
            keep = np.abs(m[:, axis] - local[:, axis]) > tol
            mirrors.append(m[keep])
        sites = np.vstack(mirrors)
        vor = Voronoi(sites)

        box = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        tree = cKDTree(local)
        cells, area, diam, clear, boundary = [], np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool)
        for k in range(n):
            region = vor.regions[vor.point_region[k]]
            verts = None
            if region and -1 not in region:
                verts = vor.vertices[region]
                inside = (np.abs(verts[:, 0]) <= hw + tol) & (np.abs(verts[:, 1]) <= hh + tol)
                if not inside.all():
                    verts = None
            if verts is None:
                # Boundary generators lose their mirror; clip by bisectors directly.
                verts = _clip_to_neighbors(box.copy(), local, k, tree)
            verts = _order_polygon(np.clip(verts, -np.array([hw, hh]), np.array([hw, hh])), tol)
            area[k] = polygon_area(verts)
            diam[k] = float(pdist(verts).max()) if len(verts) > 1 else 0.0
            clear[k] = float(max(_edge_distances(verts, local[k]).min(), 0.0)) if len(verts) > 2 else 0.0
            boundary[k] = bool(np.any((np.abs(verts[:, 0]) >= hw - tol) | (np.abs(verts[:, 1]) >= hh - tol)))
            cells.append(clip.to_global(verts))

        adj_indptr = adj_indices = None
        adjacency_error = None
        centered = local - local.mean(axis=0)
        if n < 3 or np.linalg.matrix_rank(centered, tol=tol) < 2:
            adjacency_error = f"adjacency needs >= 3 non-collinear points (got {n})"
        else:
            rp = vor.ridge_points
            rv = np.asarray(vor.ridge_vertices, dtype=np.int64).reshape(-1, 2)
            keep = (rp[:, 0] < n) & (rp[:, 1] < n) & (rv >= 0).all(axis=1)
            rp, rv = rp[keep], rv[keep]
            # zero-length ridges come from cocircular sites; they are not shared edges
            length = pair_distance(vor.vertices[rv[:, 0]], vor.vertices[rv[:, 1]])
            pairs = rp[length > tol].astype(np.int64)
            r = np.concatenate([pairs[:, 0], pairs[:, 1]])
            c = np.concatenate([pairs[:, 1], pairs[:, 0]])
            mat = csr_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
            mat.sum_duplicates()
            mat.sort_indices()
            adj_indptr, adj_indices = mat.indptr.astype(np.int64), mat.indices.astype(np.int64)

        logger.info(f"🔷 Voronoi diagram: {n} cells, {int(boundary.sum())} touching the clip boundary")
        return VoronoiDiagram(
            ids=cloud.ids, points=cloud.points, clip=clip, cells=cells, area=area, diameter=diam,
            clearance=clear, boundary=boundary, adj_indptr=adj_indptr, adj_indices=adj_indices,
            adjacency_error=adjacency_error,
        )

    @staticmethod
    def inradius(diagram: VoronoiDiagram, pos: int) -> float:
        """Largest inscribed ball of the clipped cell (Chebyshev center LP)."""
        cache = diagram._inradius
        if pos in cache:
            return cache[pos]
        v = diagram.cells[pos]
        if len(v) < 3:
            cache[pos] = 0.0
            return 0.0
        e = np.roll(v, -1, axis=0) - v
        # outward normals of a counter-clockwise polygon
        normals = np.column_stack([e[:, 1], -e[:, 0]])
        norms = np.hypot(normals[:, 0], normals[:, 1])
        ok = norms > 0
        normals, norms, base = normals[ok] / norms[ok, None], norms[ok], v[ok]
        b = np.einsum("ij,ij->i", normals, base)
        a_ub = np.column_stack([normals, np.ones(len(normals))])
        res = linprog(c=[0.0, 0.0, -1.0], A_ub=a_ub, b_ub=b,
                      bounds=[(None, None), (None, None), (0, None)], method="highs")
        if not res.success:
            raise GeometryError(f"in-radius LP failed for cell {int(diagram.ids[pos])}: {res.message}")
        r = float(res.x[2])
        cache[pos] = r
        return r

    @staticmethod
    def inradii(diagram: VoronoiDiagram) -> np.ndarray:
        return np.array([GeometryService.inradius(diagram, k) for k in range(len(diagram))])

    # --- Regular sub-cluster ---
    @staticmethod
    def regular_subcluster(cloud: PointCloud, diagram: VoronoiDiagram, alpha: float, lam: float,
                           scale: float = 1.0) -> RegularMask:
        """
        η^α(λ) at the given scale (ε for η_ε): in > α·ε, diam < ε/α and
        η(B_{λε}(x)) <= λ²/α with x counted. Boundary cells are irregular.
        """
        if not (alpha > 0 and lam > 0 and scale > 0):
            raise InvalidInputError("alpha, lambda and scale must be positive")
        if len(diagram) != len(cloud) or not np.array_equal(diagram.ids, cloud.ids):
            raise InvalidInputError("diagram was not built on this cloud")

        counts = GeometryService.ball_counts(cloud, lam * scale)
        mask = (~diagram.boundary) & (diagram.diameter < scale / alpha) & (counts <= lam ** 2 / alpha)
        undecided = np.nonzero(mask & (diagram.clearance <= alpha * scale))[0]
        for k in undecided:
            if GeometryService.inradius(diagram, int(k)) <= alpha * scale:
                mask[k] = False
        logger.info(f"✅ Regular sub-cluster: {int(mask.sum())}/{len(mask)} points (α={alpha}, λ={lam})")
        return RegularMask(alpha=alpha, lam=lam, scale=scale, ids=cloud.ids, mask=mask)

    # --- Nearest points and paths ---
    @staticmethod
    def nearest_point(cloud: PointCloud, queries) -> np.ndarray:
        """π_η: positions of the nearest cloud points, lexicographic order on ties."""
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if len(cloud) == 0:
            raise InvalidInputError("nearest point of an empty cloud")
        k = min(8, len(cloud))
        dist, idx = cKDTree(cloud.points).query(q, k=k)
        dist, idx = dist.reshape(len(q), k), idx.reshape(len(q), k)
        out = idx[:, 0].copy()
        ties = np.nonzero(dist[:, 1] == dist[:, 0])[0] if k > 1 else []
        for row in ties:
            cand = idx[row][dist[row] == dist[row, 0]]
            pts = cloud.points[cand]
            out[row] = cand[np.lexsort((pts[:, 1], pts[:, 0]))[0]]
        return out

    @staticmethod
    def path_metric(diagram: VoronoiDiagram, source: int, targets: Optional[Sequence[int]] = None) -> np.ndarray:
        """τ_η from the point at ``source``: fewest points on a nearest-neighbor path (inf if unreachable)."""
        hops = shortest_path(diagram.adjacency_matrix(), unweighted=True, directed=False, indices=int(source))
        tau = hops + 1.0
        return tau if targets is None else tau[np.asarray(targets)]

    @staticmethod
    def is_connected(diagram: VoronoiDiagram, positions: Sequence[int]) -> bool:
        pos = np.asarray(sorted(set(int(p) for p in positions)))
        if len(pos) <= 1:
            return True
        sub = diagram.adjacency_matrix()[pos][:, pos]
        ncomp, _ = connected_components(sub, directed=False)
        return ncomp == 1

    @staticmethod
    def diagram_to_json(diagram: VoronoiDiagram) -> Dict:
        cells = []
        for k in range(len(diagram)):
            entry = {
                "id": int(diagram.ids[k]),
                "polygon": diagram.cells[k].tolist(),
                "area": float(diagram.area[k]),
                "diameter": float(diagram.diameter[k]),
                "inradius": GeometryService.inradius(diagram, k),
                "boundary": bool(diagram.boundary[k]),
            }
            if diagram.adj_indptr is not None:
                entry["neighbors"] = diagram.ids[diagram.neighbors(k)].tolist()
            cells.append(entry)
        w = diagram.clip
        return {"clip": {"center": list(w.center), "width": w.width, "height": w.height, "angle": w.angle},
                "cells": cells}
