from fastapi import APIRouter

from app.routes.common import run_blocking
from app.schemas.api import ConvergeRequest, GridRequest, GridResponse
from app.schemas.cloud import ScalarField
from app.schemas.coarse import ReferenceFunction
from app.schemas.grid import RegularGrid
from app.services.coarse_service import CoarseGrainService
from app.services.geometry_service import GeometryService
from app.services.grid_service import GridService

router = APIRouter()


def _assemble(request: GridRequest) -> GridResponse:
    cloud = request.cloud.to_cloud()
    diagram = GeometryService.voronoi_diagram(cloud)
    mask = GeometryService.regular_subcluster(cloud, diagram, request.alpha, request.lam, scale=request.eps)
    result = GridService.assemble_grid(cloud, request.eps, request.t, request.alpha, request.lam,
                                       request.block_factor, request.upsilon, request.domain, diagram, mask,
                                       request.strategy, construction=request.construction)
    if not result.success:
        return GridResponse(success=False, failure=result.failure.model_dump(), discarded=result.discarded)
    report = GridService.validate_grid(result.grid, cloud, diagram, mask)
    return GridResponse(success=True, grid=result.grid.to_json(), discarded=result.discarded,
                        validation=report.model_dump())


def _converge(request: ConvergeRequest) -> dict:
    cloud = request.cloud.to_cloud()
    field = ScalarField(cloud=cloud, values=request.values)
    grid = RegularGrid.from_json(request.grid)
    reference = ReferenceFunction(kind=request.reference, value=request.ref_value, xi=request.ref_xi)
    report = CoarseGrainService.convergence_report([(grid.eps, grid.t, field, grid)], reference,
                                                   sampling_plan="single submitted field")
    return report.model_dump()


@router.post("/assemble")
async def assemble_grid(request: GridRequest):
    """
    Assemble a regular t-grid on the cloud and validate properties (a)-(g).
    """
    return await run_blocking(_assemble, request)


@router.post("/converge")
async def converge(request: ConvergeRequest):
    """
    Grid-restricted L² distance and coarse-grained distance to a reference.
    """
    return await run_blocking(_converge, request)
