import math

import numpy as np
import pytest
from shapely.geometry import box

from app.core.exceptions import InvalidInputError, SolverError
from app.core.rng import RandomStream
from app.schemas.cell import XiPlan
from app.schemas.cloud import SamplingSpec, ScalarField, Window
from app.schemas.energy import EnergySpec
from app.services.cell_service import CellProblemService
from app.services.energy_service import EnergyService
from app.services.geometry_service import GeometryService
from app.services.sampling_service import SamplingService

LAM = 1.5
REGION = Window.square(20.0)


def _solve(cloud, xi, region=REGION, lam=LAM, **kw):
    return CellProblemService.solve_cell_problem(cloud, region, lam, xi, **kw)


def test_lattice_value_is_closed_form():
    cloud = SamplingService.lattice_cloud(Window.square(24.0), 1.0)
    sol = _solve(cloud, (1.0, 0.0), region=Window.square(20.0), lam=1.2)
    assert math.isclose(sol.m / 400.0, 2.0, rel_tol=1e-9)
    assert CellProblemService.lattice_xi(1.2, 1.0, (1.0, 0.0)) == 2.0
    assert CellProblemService.lattice_xi(1.2, 1.0, (0.6, 0.8)) == pytest.approx(2.0)


def test_lattice_xi_counts_diagonal_neighbors():
    # λ=1.5 reaches the four diagonal neighbors as well
    assert CellProblemService.lattice_xi(1.5, 1.0, (1.0, 0.0)) == pytest.approx(6.0)


def test_solution_residual_and_bounds(poisson_cloud):
    sol = _solve(poisson_cloud, (1.0, 0.0))
    assert sol.residual <= 1e-10
    assert sol.m <= CellProblemService.affine_upper_bound(poisson_cloud, REGION, LAM, (1.0, 0.0)) * (1 + 1e-10)
    assert sol.m > 0
    assert math.isclose(sol.quadratic_value, sol.m, rel_tol=1e-8)


def test_clamped_points_keep_affine_values(poisson_cloud):
    xi = np.array([0.3, -0.7])
    sol = _solve(poisson_cloud, xi)
    part = CellProblemService.clamp_partition(poisson_cloud, REGION, LAM, xi)
    np.testing.assert_allclose(sol.field.values[part.clamped], poisson_cloud.points[part.clamped] @ xi)
    assert REGION.distance_to_boundary(poisson_cloud.points[part.free]).min() > 2 * LAM


def test_quadratic_form_matches_energy(poisson_cloud):
    xi = (1.0, 2.0)
    part = CellProblemService.clamp_partition(poisson_cloud, REGION, LAM, xi)
    index = GeometryService.build_neighbor_index(poisson_cloud, LAM)
    system = CellProblemService.assemble_quadratic(poisson_cloud, index, part)
    w = np.random.default_rng(0).normal(size=part.n_free)
    values = poisson_cloud.points @ np.asarray(xi)
    values[part.free] = w
    direct = EnergyService.dirichlet_energy(ScalarField(cloud=poisson_cloud, values=values),
                                            EnergySpec(radius=LAM, region=REGION))
    assert math.isclose(system.value(w), direct, rel_tol=1e-10)


INVARIANT_LAM = 3.0


@pytest.fixture(scope="module", params=[0, 1, 2])
def invariant_cloud(request):
    """Unit-intensity Poisson cloud on Q_20 padded by the interaction radius 3."""
    spec = SamplingSpec(window=REGION, intensity=1.0, padding=INVARIANT_LAM, stream=RandomStream(seed=request.param))
    return SamplingService.sample_poisson(spec)


def test_homogeneity(invariant_cloud):
    m1 = _solve(invariant_cloud, (0.6, 0.8), lam=INVARIANT_LAM).m
    m2 = _solve(invariant_cloud, (1.2, 1.6), lam=INVARIANT_LAM).m
    assert math.isclose(m2, 4 * m1, rel_tol=1e-8)


def test_scaling(invariant_cloud):
    m1 = _solve(invariant_cloud, (1.0, 0.0), lam=INVARIANT_LAM).m
    small = SamplingService.scale(invariant_cloud, 0.5)
    m_half = _solve(small, (1.0, 0.0), region=Window.square(10.0), lam=INVARIANT_LAM / 2).m
    assert math.isclose(m1, 4 * m_half, rel_tol=1e-8)


def test_rotation(invariant_cloud):
    theta = math.pi / 6
    xi = np.array([1.0, 0.5])
    m1 = _solve(invariant_cloud, xi, lam=INVARIANT_LAM).m
    rotated = SamplingService.rotate(invariant_cloud, theta)
    region = Window(width=20.0, height=20.0, angle=theta)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    m2 = _solve(rotated, rot @ xi, region=region, lam=INVARIANT_LAM).m
    assert math.isclose(m1, m2, rel_tol=1e-8)


def test_subadditivity(poisson_cloud):
    xi = (1.0, 0.0)
    whole = _solve(poisson_cloud, xi).m
    left = _solve(poisson_cloud, xi, region=Window(center=(-5.0, 0.0), width=10.0, height=20.0)).m
    right = _solve(poisson_cloud, xi, region=Window(center=(5.0, 0.0), width=10.0, height=20.0)).m
    assert whole <= (left + right) * (1 + 1e-10)


def test_solver_error_carries_best_iterate(poisson_cloud):
    with pytest.raises(SolverError) as exc:
        _solve(poisson_cloud, (1.0, 0.0), tol=1e-14, max_iter=1)
    assert exc.value.best_iterate is not None
    assert exc.value.residual > 1e-14


def test_partition_validation(poisson_cloud):
    with pytest.raises(InvalidInputError):
        CellProblemService.clamp_partition(poisson_cloud, REGION, LAM, (1.0, 0.0), layer=LAM)
    with pytest.raises(InvalidInputError):
        CellProblemService.clamp_partition(poisson_cloud, REGION, 0.0, (1.0, 0.0))


def test_estimate_on_lattice():
    plan = XiPlan(sizes=[10.0, 12.0, 14.0], seeds=[0, 1], directions=[(1.0, 0.0), (0.0, 1.0)],
                  lam=1.2, mode="lattice")
    est = CellProblemService.estimate_xi(plan)
    assert len(est.rows) == 12
    assert est.failed_rows == 0
    assert all(math.isclose(r.m_normalized, 2.0, rel_tol=1e-9) for r in est.rows)
    assert est.xi_estimate == pytest.approx(2.0, rel=1e-8)
    assert [a.T for a in est.aggregates] == [10.0, 12.0, 14.0]
    assert list(CellProblemService.xi_csv_rows(est))[0][:4] == [10.0, 0, 1.0, 0.0]


def test_estimate_requires_large_cells():
    plan = XiPlan(sizes=[4.0], seeds=[0], directions=[(1.0, 0.0)], lam=1.2)
    with pytest.raises(InvalidInputError):
        CellProblemService.estimate_xi(plan)


def test_realization_is_reproducible():
    plan = XiPlan(sizes=[10.0], seeds=[3], directions=[(1.0, 0.0)], lam=2.0, master_seed=11)
    a = CellProblemService.realization(plan, 10.0, 3)
    b = CellProblemService.realization(plan, 10.0, 3)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, CellProblemService.realization(plan, 10.0, 4).points)


@pytest.fixture(scope="module")
def fine_cloud():
    eps = 0.02
    cloud = SamplingService.lattice_cloud(Window.square(1.2 / eps), 1.0, jitter=0.3, stream=RandomStream(seed=5))
    return SamplingService.scale(cloud, eps)


def test_stitched_field_lowers_the_energy(fine_cloud):
    eps, lam, xi = 0.02, 2.0, np.array([1.0, 0.0])
    unit = box(-0.5, -0.5, 0.5, 0.5)
    stitched = CellProblemService.stitch_recovery_field(fine_cloud, eps, unit, xi, m=2, delta=0.2, lam=lam)
    affine = fine_cloud.points @ xi
    sub = Window.square(0.4)
    changed = stitched.values != affine
    assert changed.any()
    assert sub.contains(fine_cloud.points[changed]).all()

    spec = EnergySpec(radius=lam * eps, region=Window.unit())
    assert EnergyService.dirichlet_energy(stitched, spec) < \
        EnergyService.dirichlet_energy(EnergyService.affine_field(fine_cloud, xi), spec)


def test_stitched_field_tends_to_affine_as_delta_grows(fine_cloud):
    eps, lam, xi = 0.02, 2.0, np.array([0.6, -0.8])
    unit = box(-0.5, -0.5, 0.5, 0.5)
    affine = fine_cloud.points @ xi
    changed = []
    for delta in (0.2, 0.6, 0.99):
        stitched = CellProblemService.stitch_recovery_field(fine_cloud, eps, unit, xi, m=2, delta=delta, lam=lam)
        changed.append(int(np.sum(stitched.values != affine)))
        if delta == 0.99:
            np.testing.assert_array_equal(stitched.values, affine)
    assert changed[0] >= changed[1] >= changed[2] == 0
    assert changed[0] > 0


def test_piecewise_affine_adds_offsets(fine_cloud):
    left, right = box(-0.5, -0.5, 0.0, 0.5), box(0.0, -0.5, 0.5, 0.5)
    field = CellProblemService.stitch_piecewise_affine(
        fine_cloud, 0.02, [(left, (1.0, 0.0), 0.0), (right, (-1.0, 0.0), 0.0)], m=2, delta=0.5, lam=2.0)
    assert not np.isnan(field.values).any()
    far = np.abs(fine_cloud.points[:, 0]) > 0.55
    np.testing.assert_allclose(field.values[far], -np.abs(fine_cloud.points[far, 0]))


def test_stitching_validates_parameters(fine_cloud):
    unit = box(-0.5, -0.5, 0.5, 0.5)
    with pytest.raises(InvalidInputError):
        CellProblemService.stitch_recovery_field(fine_cloud, 0.02, unit, (1.0, 0.0), m=2, delta=1.0, lam=2.0)
    with pytest.raises(InvalidInputError):
        CellProblemService.stitch_recovery_field(fine_cloud, 0.02, unit, (1.0, 0.0), m=0, delta=0.2, lam=2.0)
