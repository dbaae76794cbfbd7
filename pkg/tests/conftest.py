import numpy as np
import pytest

from app.core.rng import RandomStream
from app.schemas.cloud import PointCloud, SamplingSpec, Window
from app.schemas.experiment import GridParams
from app.services.experiment_service import grid_cloud
from app.services.geometry_service import GeometryService
from app.services.grid_service import GridService
from app.services.sampling_service import SamplingService

# A jittered lattice at ε=0.005 on which every block is good: three mesoscale
# squares per side (domain Q_0.5, t=0.25) and two crossings per rectangle.
GRID_PARAMS = dict(eps=0.005, t=0.25, alpha=0.05, lam=2.0, block_factor=10, upsilon=100.0)


@pytest.fixture
def stream():
    return RandomStream(seed=12345)


@pytest.fixture
def poisson_cloud():
    """Unit-intensity Poisson cloud on Q_20 padded by 3."""
    spec = SamplingSpec(window=Window.square(20.0), intensity=1.0, padding=3.0, stream=RandomStream(seed=7))
    return SamplingService.sample_poisson(spec)


@pytest.fixture
def lattice_20():
    """Perfect unit lattice on Q_20: id = 20·row + column, point (column - 9.5, row - 9.5)."""
    return SamplingService.lattice_cloud(Window.square(20.0), 1.0)


@pytest.fixture
def small_cloud():
    pts = np.array([[0.1, 0.2], [0.5, -0.3], [-0.4, 0.4], [-0.2, -0.1], [0.3, 0.35]])
    return PointCloud(points=pts, ids=[10, 3, 7, 1, 42], window=Window.square(2.0))


@pytest.fixture(scope="session")
def grid_setup():
    params = GridParams(domain_side=0.5, **GRID_PARAMS)
    cloud = grid_cloud(params, params.eps, RandomStream(seed=2024))
    diagram = GeometryService.voronoi_diagram(cloud)
    mask = GeometryService.regular_subcluster(cloud, diagram, params.alpha, params.lam, scale=params.eps)
    result = GridService.assemble_grid(cloud, params.eps, params.t, params.alpha, params.lam, params.block_factor,
                                       params.upsilon, Window.square(0.5), diagram, mask)
    return {"params": params, "cloud": cloud, "diagram": diagram, "mask": mask, "result": result}
