import logging
import math
from collections import deque
from typing import Dict, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.spatial import cKDTree
from shapely.geometry import LineString, Polygon

from app.core.exceptions import InvalidInputError, PathConstructionError
from app.core.rng import RandomStream
from app.schemas.cloud import PointCloud, Window
from app.schemas.geometry import RegularMask, VoronoiDiagram
from app.schemas.grid import BlockField, BlockPath, Orientation, PointPath
from app.services.geometry_service import GeometryService

logger = logging.getLogger(__name__)

SIDES = ("left", "right", "bottom", "top")


def rect_side(rect: Window, side: str) -> LineString:
    x0, y0, x1, y1 = rect.bounds
    return {
        "left": LineString([(x0, y0), (x0, y1)]),
        "right": LineString([(x1, y0), (x1, y1)]),
        "bottom": LineString([(x0, y0), (x1, y0)]),
        "top": LineString([(x0, y1), (x1, y1)]),
    }[side]


def cells_meeting(diagram: VoronoiDiagram, positions: np.ndarray, rect: Window, side: str) -> np.ndarray:
    """Boolean mask over ``positions``: the Voronoi cell meets the given side of ``rect``."""
    positions = np.asarray(positions, dtype=np.int64)
    if not len(positions):
        return np.zeros(0, dtype=bool)
    line = rect_side(rect, side)
    x0, y0, x1, y1 = rect.bounds
    pts = diagram.points[positions]
    coord = {"left": (0, x0), "right": (0, x1), "bottom": (1, y0), "top": (1, y1)}[side]
    near = np.abs(pts[:, coord[0]] - coord[1]) <= diagram.diameter[positions]
    out = np.zeros(len(positions), dtype=bool)
    for k in np.nonzero(near)[0]:
        out[k] = Polygon(diagram.cells[positions[k]]).intersects(line)
    return out


class PercolationService:

    # --- Block field ---
    @staticmethod
    def block_field(cloud: PointCloud, alpha: float, lam: float, block_factor: int, region: Window,
                    scale: float = 1.0, side: Optional[float] = None,
                    origin: Optional[Sequence[float]] = None) -> BlockField:
        """
        Classify the blocks Q_{Λλ}(i) inside ``region`` (lengths times ``scale``):
        I   every λ-subsquare holds between 1 and λ²/(8α) points,
        II  points of the block are pairwise at least 2α apart,
        III points are at least 2α from the block boundary.
        """
        if block_factor < 10 or int(block_factor) != block_factor:
            raise InvalidInputError(f"block factor Λ must be an integer >= 10, got {block_factor}")
        if not (alpha > 0 and lam > 0 and scale > 0):
            raise InvalidInputError("alpha, lambda and scale must be positive")
        L = int(block_factor)
        side = float(side) if side is not None else L * lam * scale
        xmin, ymin, xmax, ymax = region.bounds
        if origin is None:
            # blocks centered on the lattice side·ℤ²
            ox = (math.ceil((xmin + side / 2) / side - 1e-9) - 0.5) * side
            oy = (math.ceil((ymin + side / 2) / side - 1e-9) - 0.5) * side
        else:
            ox, oy = float(origin[0]), float(origin[1])
        nx_ = max(int(math.floor((xmax - ox) / side + 1e-9)), 0)
        ny_ = max(int(math.floor((ymax - oy) / side + 1e-9)), 0)

        counts_ok = np.zeros((nx_, ny_), dtype=bool)
        spacing_ok = np.ones((nx_, ny_), dtype=bool)
        margin_ok = np.ones((nx_, ny_), dtype=bool)
        if nx_ and ny_:
            pts = cloud.points
            rel = (pts - np.array([ox, oy])) / side
            inside = (rel[:, 0] >= 0) & (rel[:, 0] < nx_) & (rel[:, 1] >= 0) & (rel[:, 1] < ny_) if len(pts) \
                else np.zeros(0, dtype=bool)
            rel, sel = rel[inside], pts[inside]
            bx = np.floor(rel[:, 0]).astype(np.int64)
            by = np.floor(rel[:, 1]).astype(np.int64)

            sub = np.zeros((nx_ * L, ny_ * L), dtype=np.int64)
            sx = np.minimum(np.floor(rel[:, 0] * L).astype(np.int64), nx_ * L - 1)
            sy = np.minimum(np.floor(rel[:, 1] * L).astype(np.int64), ny_ * L - 1)
            np.add.at(sub, (sx, sy), 1)
            upper = lam ** 2 / (8.0 * alpha)
            sub_ok = (sub >= 1) & (sub <= upper)
            counts_ok = sub_ok.reshape(nx_, L, ny_, L).all(axis=(1, 3))

            gap = 2.0 * alpha * scale
            frac = (rel - np.floor(rel)) * side
            margin = np.minimum(np.minimum(frac[:, 0], side - frac[:, 0]), np.minimum(frac[:, 1], side - frac[:, 1]))
            bad = margin < gap
            margin_ok[bx[bad], by[bad]] = False

            if len(sel) > 1:
                pairs = cKDTree(sel).query_pairs(r=np.nextafter(gap, 0), output_type="ndarray")
                same = (bx[pairs[:, 0]] == bx[pairs[:, 1]]) & (by[pairs[:, 0]] == by[pairs[:, 1]])
                spacing_ok[bx[pairs[same, 0]], by[pairs[same, 0]]] = False

        good = counts_ok & spacing_ok & margin_ok
        logger.info(f"🧱 Block field {nx_}x{ny_}: {int(good.sum())} good blocks (α={alpha}, λ={lam}, Λ={L})")
        return BlockField(alpha=alpha, lam=lam, block_factor=L, scale=scale, side=side, origin=(ox, oy),
                          good=good, cond_counts=counts_ok, cond_spacing=spacing_ok, cond_margin=margin_ok)

    @staticmethod
    def condition_probability(alpha: float, lam: float, block_factor: int) -> Dict[str, float]:
        """
        P(condition I) for a unit-intensity Poisson cloud:
        p_λ(α)^(Λ²) with p_λ(α) = P(1 <= Poisson(λ²) <= λ²/(8α)).
        """
        kmax = math.floor(lam ** 2 / (8.0 * alpha))
        p_sub = float(stats.poisson.cdf(kmax, lam ** 2) - stats.poisson.pmf(0, lam ** 2)) if kmax >= 1 else 0.0
        return {"p_subsquare": p_sub, "p_condition_I": p_sub ** (block_factor ** 2)}

    @staticmethod
    def bernoulli_field(shape: Tuple[int, int], p: float, stream: RandomStream) -> BlockField:
        """I.i.d. good blocks with probability p on a unit-side lattice."""
        if not 0 <= p <= 1:
            raise InvalidInputError(f"p must lie in [0, 1], got {p}")
        good = stream.generator().random(shape) < p
        return BlockField(alpha=float("nan"), lam=float("nan"), block_factor=10, side=1.0,
                          origin=(0.0, 0.0), good=good)

    # --- Crossings ---
    @staticmethod
    def _crossing_graph(alive: np.ndarray, direction: Orientation):
        """Directed grid graph with a virtual source (node n) and sink (node n+1)."""
        nx_, ny_ = alive.shape
        n = nx_ * ny_
        idx = np.arange(n).reshape(nx_, ny_)
        rows, cols = [], []
        for a, b in ((idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:])):
            ok = alive.ravel()[a.ravel()] & alive.ravel()[b.ravel()]
            rows += [a.ravel()[ok], b.ravel()[ok]]
            cols += [b.ravel()[ok], a.ravel()[ok]]
        if direction == "h":
            first, last = idx[0, :], idx[-1, :]
        else:
            first, last = idx[:, 0], idx[:, -1]
        first = first[alive.ravel()[first]]
        last = last[alive.ravel()[last]]
        rows += [np.full(len(first), n), last]
        cols += [first, np.full(len(last), n + 1)]
        r, c = np.concatenate(rows), np.concatenate(cols)
        return coo_matrix((np.ones(len(r)), (r, c)), shape=(n + 2, n + 2)).tocsr()

    @staticmethod
    def find_crossings(field: BlockField, rect: Optional[Window], direction: Orientation, want: Optional[int] = None,
                       strategy: str = "greedy") -> List[BlockPath]:
        """
        Vertex-disjoint good-block crossings of the blocks inside ``rect``
        (h: left to right, v: bottom to top), sorted from the bottom (h) or the left (v).
        """
        if rect is None:
            sx, sy = slice(0, field.shape[0]), slice(0, field.shape[1])
        else:
            sx, sy = field.blocks_inside(rect)
        good = field.good[sx, sy]
        want = want if want is not None else good.size
        if good.size == 0 or want <= 0:
            return []
        if strategy == "maxflow":
            paths = PercolationService._crossings_maxflow(good, direction, want)
        elif strategy == "greedy":
            paths = PercolationService._crossings_greedy(good, direction, want)
        else:
            raise InvalidInputError(f"unknown crossing strategy '{strategy}'")

        out = [BlockPath(direction=direction, blocks=[(sx.start + i, sy.start + j) for i, j in p]) for p in paths]
        out.sort(key=lambda bp: (bp.mean_ordinate, bp.blocks[0]))
        return out

    @staticmethod
    def _crossings_greedy(good: np.ndarray, direction: Orientation, want: int) -> List[List[Tuple[int, int]]]:
        nx_, ny_ = good.shape
        n = nx_ * ny_
        alive = good.copy()
        paths = []
        while len(paths) < want and alive.any():
            graph = PercolationService._crossing_graph(alive, direction)
            _, pred = breadth_first_order(graph, n, directed=True, return_predecessors=True)
            if pred[n + 1] < 0:
                break
            node, path = pred[n + 1], []
            while node != n:
                path.append(divmod(int(node), ny_))
                node = pred[node]
            path.reverse()
            for i, j in path:
                alive[i, j] = False
            paths.append(path)
        return paths

    @staticmethod
    def _crossings_maxflow(good: np.ndarray, direction: Orientation, want: int) -> List[List[Tuple[int, int]]]:
        nx_, ny_ = good.shape
        g = nx.Graph()
        cells = [(i, j) for i in range(nx_) for j in range(ny_) if good[i, j]]
        g.add_nodes_from(cells)
        for i, j in cells:
            for di, dj in ((1, 0), (0, 1)):
                if i + di < nx_ and j + dj < ny_ and good[i + di, j + dj]:
                    g.add_edge((i, j), (i + di, j + dj))
        src, dst = "source", "sink"
        g.add_node(src)
        g.add_node(dst)
        for i, j in cells:
            first = i == 0 if direction == "h" else j == 0
            last = i == nx_ - 1 if direction == "h" else j == ny_ - 1
            if first:
                g.add_edge(src, (i, j))
            if last:
                g.add_edge((i, j), dst)
        if not nx.has_path(g, src, dst):
            return []
        paths = [p[1:-1] for p in nx.node_disjoint_paths(g, src, dst)]
        paths.sort(key=lambda p: (len(p), p))
        return paths[:want]

    # --- Point paths ---
    @staticmethod
    def _walk_segment(diagram: VoronoiDiagram, start: int, a: np.ndarray, b: np.ndarray) -> List[int]:
        """Cells crossed by the segment [a, b], starting in the cell of ``start``."""
        d = b - a
        g, s_cur, prev = start, 0.0, -1
        out = [g]
        for _ in range(len(diagram)):
            nbrs = diagram.neighbors(g)
            pg = diagram.points[g]
            pn = diagram.points[nbrs]
            diff = pn - pg
            denom = 2.0 * diff @ d
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (np.einsum("ij,ij->i", pn, pn) - pg @ pg - 2.0 * diff @ a) / denom
            ok = (denom > 0) & (s >= s_cur - 1e-12) & (nbrs != prev)
            if not ok.any():
                break
            k = np.nonzero(ok)[0]
            best = k[np.lexsort((nbrs[k], s[k]))[0]]
            if s[best] >= 1.0:
                break
            prev, g, s_cur = g, int(nbrs[best]), float(s[best])
            out.append(g)
        return out

    @staticmethod
    def _erase_loops(seq: List[int]) -> List[int]:
        out: List[int] = []
        where: Dict[int, int] = {}
        for p in seq:
            if out and out[-1] == p:
                continue
            if p in where:
                cut = where[p]
                for q in out[cut + 1:]:
                    where.pop(q, None)
                out = out[:cut + 1]
                continue
            where[p] = len(out)
            out.append(p)
        return out

    @staticmethod
    def _bfs_to(diagram: VoronoiDiagram, start: int, allowed: np.ndarray, targets: np.ndarray) -> Optional[List[int]]:
        """Shortest nearest-neighbor path from ``start`` to any target through allowed points."""
        if targets[start]:
            return [start]
        pred = {start: -1}
        queue = deque([start])
        while queue:
            g = queue.popleft()
            for n in diagram.neighbors(g):
                n = int(n)
                if n in pred or not allowed[n]:
                    continue
                pred[n] = g
                if targets[n]:
                    path = [n]
                    while pred[path[-1]] != -1:
                        path.append(pred[path[-1]])
                    return path[::-1]
                queue.append(n)
        return None

    @staticmethod
    def blocks_to_point_path(path: BlockPath, field: BlockField, cloud: PointCloud, diagram: VoronoiDiagram,
                             mask: RegularMask, rect: Optional[Window] = None) -> PointPath:
        """
        Points whose Voronoi cells are crossed by the polyline joining consecutive
        block centers, ordered along it. With ``rect`` the polyline is prolonged to the
        two crossed sides, points outside the open rectangle are dropped and each end is
        completed through regular points to a cell meeting its side.
        """
        if not path.blocks:
            raise PathConstructionError("empty block path", rect=rect)
        for ix, iy in path.blocks:
            if not field.good[ix, iy]:
                raise PathConstructionError(f"block {(ix, iy)} is not good", rect=rect)
        centers = [field.center(ix, iy) for ix, iy in path.blocks]
        if rect is not None:
            x0, y0, x1, y1 = rect.bounds
            first, last = centers[0].copy(), centers[-1].copy()
            if path.direction == "h":
                first[0], last[0] = x0, x1
            else:
                first[1], last[1] = y0, y1
            centers = [first] + centers + [last]
        poly = np.array(centers)

        start = int(GeometryService.nearest_point(cloud, poly[0])[0])
        walk = [start]
        for a, b in zip(poly[:-1], poly[1:]):
            walk += PercolationService._walk_segment(diagram, walk[-1], a, b)[1:]
        walk = PercolationService._erase_loops(walk)

        if rect is not None:
            inside = rect.contains(diagram.points, closed=False)
            walk = [p for p in walk if inside[p]]
            if not walk:
                raise PathConstructionError("no crossed cell lies inside the rectangle", rect=rect)
            allowed = inside & mask.mask
            sides = ("left", "right") if path.direction == "h" else ("bottom", "top")
            ends = []
            for side, anchor in zip(sides, (walk[0], walk[-1])):
                targets = np.zeros(len(diagram), dtype=bool)
                cand = np.nonzero(allowed)[0]
                targets[cand] = cells_meeting(diagram, cand, rect, side)
                ext = PercolationService._bfs_to(diagram, anchor, allowed, targets) if allowed[anchor] else None
                if ext is None:
                    raise PathConstructionError(f"cannot reach the {side} side through regular points",
                                                rect=rect, point_id=int(diagram.ids[anchor]))
                ends.append(ext)
            walk = ends[0][::-1] + walk[1:-1] + ends[1] if len(walk) > 1 else ends[0][::-1] + ends[1][1:]
            walk = PercolationService._erase_loops(walk)

        for p in walk:
            if not mask.mask[p]:
                raise PathConstructionError("path crosses an irregular cell", rect=rect,
                                            point_id=int(diagram.ids[p]))
        for a, b in zip(walk[:-1], walk[1:]):
            if not diagram.are_neighbors(a, b):
                raise PathConstructionError("consecutive cells do not share an edge", rect=rect,
                                            point_id=int(diagram.ids[b]))
        return PointPath(ids=[int(diagram.ids[p]) for p in walk],
                         rect=rect if rect is not None else cloud.window, orientation=path.direction)

    # --- Junctions ---
    @staticmethod
    def separated_from_side(diagram: VoronoiDiagram, rect: Window, barrier: Set[int], side: str) -> np.ndarray:
        """
        For every point of the closed rectangle: True when each nearest-neighbor path
        inside the rectangle from the point to ``side`` meets ``barrier``.
        """
        n = len(diagram)
        in_rect = rect.contains(diagram.points)
        free = in_rect.copy()
        bar = np.fromiter(barrier, dtype=np.int64, count=len(barrier))
        free[bar] = False
        edges = diagram.edges()
        keep = free[edges[:, 0]] & free[edges[:, 1]]
        e = edges[keep]
        graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
        _, labels = connected_components(graph, directed=False)
        pos = np.nonzero(free)[0]
        touching = pos[cells_meeting(diagram, pos, rect, side)]
        reach = np.zeros(labels.max() + 1, dtype=bool)
        reach[labels[touching]] = True
        out = np.zeros(n, dtype=bool)
        out[in_rect] = True
        out[free] = ~reach[labels[free]]
        return out

    @staticmethod
    def _side_predicate(diagram: VoronoiDiagram, rect: Window, path: PointPath, side: str,
                        positions: np.ndarray) -> np.ndarray:
        """Whether each position is cut off from ``side`` of ``rect`` by ``path``; outside points by position."""
        barrier = set(int(p) for p in diagram_positions(diagram, path.ids))
        sep = PercolationService.separated_from_side(diagram, rect, barrier, side)
        x0, y0, x1, y1 = rect.bounds
        pts = diagram.points[positions]
        inside = rect.contains(pts)
        beyond = {  # outside the rectangle: on the far side from ``side``
            "top": pts[:, 1] < y0, "bottom": pts[:, 1] > y1,
            "right": pts[:, 0] < x0, "left": pts[:, 0] > x1,
        }[side]
        return np.where(inside, sep[positions], beyond)

    @staticmethod
    def _check_separates(diagram: VoronoiDiagram, rect: Window, path: PointPath, sides: Tuple[str, str]) -> None:
        barrier = set(int(p) for p in diagram_positions(diagram, path.ids))
        sep = PercolationService.separated_from_side(diagram, rect, barrier, sides[1])
        pos = np.nonzero(rect.contains(diagram.points))[0]
        pos = np.array([p for p in pos if p not in barrier], dtype=np.int64)
        start = pos[cells_meeting(diagram, pos, rect, sides[0])] if len(pos) else pos
        if len(start) and not sep[start].all():
            raise PathConstructionError(f"path does not separate the {sides[0]} from the {sides[1]} side",
                                        rect=rect)

    @staticmethod
    def join_paths(v1: PointPath, h: PointPath, v2: PointPath, rect: Window, rect_tilde: Window,
                   cloud: PointCloud, diagram: VoronoiDiagram, mask: Optional[RegularMask] = None) -> PointPath:
        """
        Junction {x∈v1 below h in R} ∪ {y∈h right of v1 in R and left of v2 in R~}
        ∪ {x∈v2 above h in R~}, walked in path order; joints that are not nearest
        neighbors are bridged by a shortest path.

        ``v1`` and ``v2`` share an orientation and ``h`` is transversal to it. For
        horizontal v1, v2 read left/right for below/above. When R~ lies on the low
        side of R the roles of the two cross sides are swapped.
        """
        if v1.orientation != v2.orientation or h.orientation == v1.orientation:
            raise InvalidInputError("join needs two parallel paths and one transversal path")
        if v1.orientation == "v":
            back, forth, low, high, axis = "bottom", "top", "left", "right", 0
        else:
            back, forth, low, high, axis = "left", "right", "bottom", "top", 1
        rising = rect_tilde.center[axis] >= rect.center[axis]
        near, far = (low, high) if rising else (high, low)

        PercolationService._check_separates(diagram, rect, h, (back, forth))
        PercolationService._check_separates(diagram, rect_tilde, h, (back, forth))
        PercolationService._check_separates(diagram, rect, v1, (low, high))
        PercolationService._check_separates(diagram, rect_tilde, v2, (low, high))

        p1 = diagram_positions(diagram, v1.ids)
        ph = diagram_positions(diagram, h.ids)
        p2 = diagram_positions(diagram, v2.ids)
        before = PercolationService._side_predicate(diagram, rect, h, forth, p1)
        past_v1 = PercolationService._side_predicate(diagram, rect, v1, near, ph)
        short_of_v2 = PercolationService._side_predicate(diagram, rect_tilde, v2, far, ph)
        after = PercolationService._side_predicate(diagram, rect_tilde, h, back, p2)

        bridge_part = list(ph[past_v1 & short_of_v2])
        if not rising:
            bridge_part.reverse()
        seq = [int(s) for s in list(p1[before]) + bridge_part + list(p2[after])]
        joined: List[int] = []
        allowed = np.ones(len(diagram), dtype=bool) if mask is None else mask.mask.copy()
        for p in seq:
            if joined and joined[-1] == p:
                continue
            if joined and not diagram.are_neighbors(joined[-1], p):
                targets = np.zeros(len(diagram), dtype=bool)
                targets[p] = True
                allowed[p] = True
                bridge = PercolationService._bfs_to(diagram, joined[-1], allowed, targets)
                if bridge is None:
                    raise PathConstructionError("cannot bridge the junction", rect=rect,
                                                point_id=int(diagram.ids[p]))
                joined += bridge[1:-1]
            joined.append(p)
        joined = PercolationService._erase_loops(joined)
        if not joined or joined[0] != int(p1[0]) or joined[-1] != int(p2[-1]):
            raise PathConstructionError("junction lost the end points of the joined paths", rect=rect)
        return PointPath(ids=[int(diagram.ids[p]) for p in joined], rect=v1.rect, orientation=v1.orientation)


def diagram_positions(diagram: VoronoiDiagram, ids: Sequence[int]) -> np.ndarray:
    order = np.argsort(diagram.ids, kind="stable")
    pos = np.searchsorted(diagram.ids[order], np.asarray(ids, dtype=np.int64))
    return order[pos]
