import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from app.core.exceptions import InvalidInputError, PaddingError
from app.core.rng import RandomStream
from app.schemas.cloud import PointCloud, SamplingSpec, ScalarField, Window
from app.schemas.energy import EnergySpec, Kernel
from app.services.energy_service import EnergyService
from app.services.geometry_service import GeometryService
from app.services.sampling_service import SamplingService


@pytest.fixture
def pair_cloud():
    return PointCloud(points=[[0.0, 0.0], [0.5, 0.0]], ids=[4, 9], window=Window.square(4.0))


def test_ordered_pairs_inside_count_twice(pair_cloud):
    u = ScalarField(cloud=pair_cloud, values=[0.0, 3.0])
    spec = EnergySpec(radius=1.0, region=Window.square(2.0))
    assert EnergyService.dirichlet_energy(u, spec) == 18.0


def test_pairs_leaving_the_region_count_once():
    cloud = PointCloud(points=[[0.0, 0.0], [1.2, 0.0]], window=Window.square(6.0))
    u = ScalarField(cloud=cloud, values=[1.0, 0.0])
    spec = EnergySpec(radius=1.5, region=Window.square(2.0))
    assert EnergyService.dirichlet_energy(u, spec) == 1.0
    np.testing.assert_array_equal(EnergyService.boundary_set(cloud, Window.square(2.0), 1.5), [1])


def test_energy_requires_padding(pair_cloud):
    u = ScalarField.constant(pair_cloud, 1.0)
    with pytest.raises(PaddingError):
        EnergyService.dirichlet_energy(u, EnergySpec(radius=1.5, region=Window.square(2.0)))


def test_constant_field_has_zero_energy(poisson_cloud):
    u = ScalarField.constant(poisson_cloud, 2.5)
    assert EnergyService.dirichlet_energy(u, EnergySpec(radius=3.0, region=Window.square(20.0))) == 0.0


def test_indicator_kernel_matches_dirichlet(poisson_cloud):
    u = EnergyService.affine_field(poisson_cloud, (0.3, -1.0))
    plain = EnergySpec(radius=2.0, region=Window.square(20.0))
    weighted = EnergySpec(radius=2.0, region=Window.square(20.0), kernel=EnergyService.indicator_kernel(2.0))
    assert math.isclose(EnergyService.kernel_energy(u, weighted), EnergyService.dirichlet_energy(u, plain),
                        rel_tol=1e-12)


def test_cone_kernel_weights(pair_cloud):
    u = ScalarField(cloud=pair_cloud, values=[0.0, 3.0])
    spec = EnergySpec(radius=1.0, region=Window.square(2.0), kernel=Kernel(kind="cone", support=1.0))
    assert math.isclose(EnergyService.kernel_energy(u, spec), 9.0, rel_tol=1e-12)


def test_kernel_support_must_fit_radius(pair_cloud):
    u = ScalarField.constant(pair_cloud, 0.0)
    spec = EnergySpec(radius=1.0, region=Window.square(2.0), kernel=Kernel(kind="indicator", support=1.5))
    with pytest.raises(InvalidInputError):
        EnergyService.kernel_energy(u, spec)


def test_energy_constants():
    c = EnergyService.energy_constants(2.0)
    assert math.isclose(c["pair_count_density"], 1 + 4 * math.pi)
    assert math.isclose(c["affine_energy_density"], 4 * math.pi)


def _clouds(n, side, lam):
    for seed in range(n):
        spec = SamplingSpec(window=Window.square(side), intensity=1.0, padding=lam, stream=RandomStream(seed=seed))
        yield SamplingService.sample_poisson(spec)


def test_affine_energy_mean_matches_mecke():
    lam, side = 2.0, 30.0
    region = Window.square(side)
    values = [EnergyService.dirichlet_energy(EnergyService.affine_field(c, (1.0, 0.0)),
                                             EnergySpec(radius=lam, region=region)) / region.area
              for c in _clouds(40, side, lam)]
    expected = EnergyService.energy_constants(lam)["affine_energy_density"]
    assert abs(np.mean(values) / expected - 1) < 0.05


def test_pair_count_mean_matches_mecke():
    lam, side = 2.0, 30.0
    region = Window.square(side)
    values = [EnergyService.pair_count(c, 1.0, lam, region) / region.area for c in _clouds(40, side, lam)]
    expected = EnergyService.energy_constants(lam)["pair_count_density"]
    assert abs(np.mean(values) / expected - 1) < 0.05


def test_pair_count_is_scale_invariant(poisson_cloud):
    region = Window.square(20.0)
    small = SamplingService.scale(poisson_cloud, 0.5)
    direct = EnergyService.pair_count(poisson_cloud, 1.0, 2.0, region)
    scaled = EnergyService.pair_count(small, 0.5, 2.0, Window.square(10.0))
    assert math.isclose(direct, 4 * scaled, rel_tol=1e-12)


def _pairwise_energy(points, values, radius, region):
    total = 0.0
    inside = region.contains(points)
    for i in range(len(points)):
        if not inside[i]:
            continue
        for j in range(len(points)):
            if i != j and np.hypot(*(points[i] - points[j])) < radius:
                total += (values[i] - values[j]) ** 2
    return total


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dirichlet_energy_matches_pair_loop(seed):
    spec = SamplingSpec(window=Window.square(10.0), intensity=1.5, padding=1.5, stream=RandomStream(seed=seed))
    cloud = SamplingService.sample_poisson(spec)
    assert len(cloud) <= 400
    values = np.random.default_rng(seed).normal(size=len(cloud))
    region = Window(center=(0.5, -1.0), width=8.0, height=6.0)
    expected = _pairwise_energy(cloud.points, values, 1.5, region)
    energy = EnergyService.dirichlet_energy(ScalarField(cloud=cloud, values=values),
                                            EnergySpec(radius=1.5, region=region))
    assert math.isclose(energy, expected, rel_tol=1e-12)


def test_energy_is_isometry_invariant(poisson_cloud):
    region = Window(center=(1.0, -2.0), width=12.0, height=10.0)
    u = ScalarField(cloud=poisson_cloud, values=np.sin(poisson_cloud.points[:, 0]) + poisson_cloud.points[:, 1] ** 2)
    before = EnergyService.dirichlet_energy(u, EnergySpec(radius=2.0, region=region))

    theta, shift = 0.7, np.array([3.0, -1.5])
    moved = SamplingService.translate(SamplingService.rotate(poisson_cloud, theta), shift)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    moved_region = Window(center=tuple(rot @ np.asarray(region.center) + shift), width=12.0, height=10.0, angle=theta)
    after = EnergyService.dirichlet_energy(ScalarField(cloud=moved, values=u.values),
                                           EnergySpec(radius=2.0, region=moved_region))
    assert math.isclose(before, after, rel_tol=1e-9)


@pytest.fixture
def two_clusters():
    rng = np.random.default_rng(3)
    left = rng.uniform(-0.5, 0.5, size=(30, 2)) + [-3.0, 0.0]
    right = rng.uniform(-0.5, 0.5, size=(30, 2)) + [3.0, 0.0]
    return PointCloud(points=np.vstack([left, right]), window=Window.square(12.0))


def test_energy_vanishes_iff_constant_on_components(two_clusters):
    spec = EnergySpec(radius=1.0, region=Window.square(8.0))
    index = GeometryService.build_neighbor_index(two_clusters, 1.0)
    rows, cols = index.pairs()
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(two_clusters),) * 2)
    n_comp, labels = connected_components(graph, directed=False)
    assert n_comp == 2

    per_component = ScalarField(cloud=two_clusters, values=np.where(labels == labels[0], 1.0, -4.0))
    assert EnergyService.dirichlet_energy(per_component, spec) == 0.0

    values = per_component.values.copy()
    values[0] += 1e-3
    assert EnergyService.dirichlet_energy(ScalarField(cloud=two_clusters, values=values), spec) > 0.0


def test_energy_is_superadditive_over_disjoint_regions(poisson_cloud):
    u = ScalarField(cloud=poisson_cloud, values=np.random.default_rng(1).normal(size=len(poisson_cloud)))
    left = Window(center=(-5.0, 0.0), width=9.0, height=20.0)
    right = Window(center=(5.0, 0.0), width=9.0, height=20.0)
    union = Window.square(20.0)

    def f(region):
        return EnergyService.dirichlet_energy(u, EnergySpec(radius=2.0, region=region))

    assert f(union) >= f(left) + f(right)
