import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from app.core.exceptions import GeometryError, InvalidInputError
from app.schemas.cloud import PointCloud, Window
from app.services.geometry_service import GeometryService, _clip_halfplane
from app.services.sampling_service import SamplingService


def _brute_pairs(points, radius):
    d = np.hypot(*(points[:, None, :] - points[None, :, :]).transpose(2, 0, 1))
    i, j = np.nonzero((d < radius) & ~np.eye(len(points), dtype=bool))
    return set(zip(i.tolist(), j.tolist()))


def test_neighbor_index_matches_brute_force(poisson_cloud):
    index = GeometryService.build_neighbor_index(poisson_cloud, 1.5)
    rows, cols = index.pairs()
    assert set(zip(rows.tolist(), cols.tolist())) == _brute_pairs(poisson_cloud.points, 1.5)
    assert len(index) == len(poisson_cloud)


def test_neighbor_index_is_strict():
    cloud = PointCloud(points=[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]], window=Window.square(4.0))
    index = GeometryService.build_neighbor_index(cloud, 1.0)
    assert 1 not in index.neighbors(0).tolist()
    assert 2 in index.neighbors(0).tolist()
    with pytest.raises(InvalidInputError):
        GeometryService.build_neighbor_index(cloud, 0.0)


def test_ball_counts_include_center():
    cloud = PointCloud(points=[[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]], window=Window.square(4.0))
    np.testing.assert_array_equal(GeometryService.ball_counts(cloud, 1.0), [2, 2, 3])
    np.testing.assert_array_equal(GeometryService.ball_counts(cloud, 0.1, points=[[1.9, 1.9]]),
                                  [0])


def test_voronoi_areas_sum_to_clip(poisson_cloud):
    diagram = GeometryService.voronoi_diagram(poisson_cloud)
    assert math.isclose(diagram.area.sum(), poisson_cloud.window.area, rel_tol=1e-9)
    assert diagram.boundary.any() and not diagram.boundary.all()


def test_cells_on_the_clip_boundary_match_full_clipping():
    rng = np.random.default_rng(8)
    inner = rng.uniform(-4.5, 4.5, size=(300, 2))
    on_sides = np.array([[-5.0, -2.0], [5.0, 1.5], [0.5, 5.0], [-3.0, -5.0], [5.0, -4.0], [-5.0, 3.3]])
    cloud = PointCloud(points=np.vstack([inner, on_sides]), window=Window.square(10.0))
    diagram = GeometryService.voronoi_diagram(cloud)
    assert math.isclose(diagram.area.sum(), 100.0, rel_tol=1e-9)

    box = np.array([[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0]])
    for k in range(len(inner), len(cloud)):
        x, cell = cloud.points[k], box
        for y in np.delete(cloud.points, k, axis=0):
            cell = _clip_halfplane(cell, y - x, 0.5 * (y @ y - x @ x))
        assert diagram.boundary[k]
        assert math.isclose(diagram.area[k], Polygon(cell).convex_hull.area, rel_tol=1e-9)


def test_voronoi_adjacency_is_symmetric(poisson_cloud):
    diagram = GeometryService.voronoi_diagram(poisson_cloud)
    adj = diagram.adjacency_matrix()
    assert (adj != adj.T).nnz == 0
    assert diagram.edges().shape[1] == 2


def test_inradius_bounds(poisson_cloud):
    diagram = GeometryService.voronoi_diagram(poisson_cloud)
    for k in range(0, len(diagram), max(1, len(diagram) // 40)):
        r = GeometryService.inradius(diagram, k)
        assert diagram.clearance[k] <= r + 1e-12
        assert r <= diagram.diameter[k] / 2 + 1e-12


def test_one_point_owns_the_clip():
    cloud = PointCloud(points=[[0.1, 0.2]], window=Window.unit())
    diagram = GeometryService.voronoi_diagram(cloud)
    assert math.isclose(diagram.area[0], 1.0, rel_tol=1e-12)
    assert diagram.adjacency_error is not None
    with pytest.raises(GeometryError):
        diagram.neighbors(0)


def test_two_points_split_by_bisector():
    cloud = PointCloud(points=[[-0.25, 0.0], [0.25, 0.0]], window=Window.unit())
    diagram = GeometryService.voronoi_diagram(cloud)
    np.testing.assert_allclose(diagram.area, [0.5, 0.5], rtol=1e-12)


def test_voronoi_rejects_points_outside_clip(poisson_cloud):
    with pytest.raises(GeometryError):
        GeometryService.voronoi_diagram(poisson_cloud, clip=Window.square(10.0))


def test_voronoi_is_rotation_equivariant(poisson_cloud):
    base = GeometryService.voronoi_diagram(poisson_cloud)
    turned = GeometryService.voronoi_diagram(SamplingService.rotate(poisson_cloud, math.pi / 6))
    np.testing.assert_array_equal(base.ids, turned.ids)
    np.testing.assert_allclose(turned.area, base.area, rtol=1e-9, atol=1e-12)


def test_lattice_cells(lattice_20):
    diagram = GeometryService.voronoi_diagram(lattice_20)
    np.testing.assert_allclose(diagram.area, 1.0, rtol=1e-9)
    assert math.isclose(GeometryService.inradius(diagram, 210), 0.5, rel_tol=1e-9)
    assert diagram.are_neighbors(210, 211)
    assert not diagram.are_neighbors(210, 212)


def test_regular_subcluster_on_lattice(lattice_20):
    diagram = GeometryService.voronoi_diagram(lattice_20)
    mask = GeometryService.regular_subcluster(lattice_20, diagram, alpha=0.05, lam=2.0)
    # everything but the ring of cells touching the clip boundary
    assert mask.count == 18 * 18
    assert not mask.mask[0] and mask.mask[21]
    tight = GeometryService.regular_subcluster(lattice_20, diagram, alpha=0.6, lam=2.0)
    assert tight.count == 0


def test_regular_subcluster_checks_the_diagram(lattice_20, small_cloud):
    diagram = GeometryService.voronoi_diagram(small_cloud)
    with pytest.raises(InvalidInputError):
        GeometryService.regular_subcluster(lattice_20, diagram, 0.05, 2.0)


def test_nearest_point_breaks_ties_lexicographically():
    cloud = PointCloud(points=[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], window=Window.square(4.0))
    assert GeometryService.nearest_point(cloud, [0.0, 0.0])[0] == 2
    np.testing.assert_array_equal(GeometryService.nearest_point(cloud, [[0.9, 0.1], [0.1, 0.8]]), [0, 1])


def test_path_metric_and_connectivity(lattice_20):
    diagram = GeometryService.voronoi_diagram(lattice_20)
    assert GeometryService.path_metric(diagram, 0, [0, 3])[1] == 4
    assert GeometryService.path_metric(diagram, 0)[0] == 1
    assert GeometryService.is_connected(diagram, [0, 1, 2, 3])
    assert not GeometryService.is_connected(diagram, [0, 5])


def test_diagram_export(small_cloud):
    diagram = GeometryService.voronoi_diagram(small_cloud)
    data = GeometryService.diagram_to_json(diagram)
    assert [c["id"] for c in data["cells"]] == small_cloud.ids.tolist()
    assert all(c["inradius"] <= c["diameter"] / 2 + 1e-12 for c in data["cells"])
    assert "neighbors" in data["cells"][0]
