from fastapi import APIRouter

from app.core.exceptions import InvalidInputError
from app.routes.common import run_blocking
from app.schemas.api import CellSolveRequest, XiRequest, XiResponse
from app.schemas.cell import XiPlan
from app.schemas.cloud import Window
from app.services.cell_service import CellProblemService

router = APIRouter()


def _solve(request: CellSolveRequest) -> dict:
    cloud = request.cloud.to_cloud()
    if request.region is None and request.T is None:
        raise InvalidInputError("give the cube side T or an explicit region")
    region = request.region or Window.square(request.T)
    sol = CellProblemService.solve_cell_problem(cloud, region, request.lam, request.xi, tol=request.tol)
    out = sol.summary()
    if request.return_field:
        out["field"] = {"ids": cloud.ids.tolist(), "values": sol.field.values.tolist()}
    return out


def _xi(request: XiRequest) -> XiResponse:
    plan = XiPlan(sizes=request.sizes, seeds=list(range(request.seeds)), directions=request.directions,
                  lam=request.lam, gamma=request.gamma, tol=request.tol, mode=request.mode,
                  spacing=request.spacing, jitter=request.jitter, master_seed=request.master_seed)
    est = CellProblemService.estimate_xi(plan)
    return XiResponse(xi_estimate=est.xi_estimate, xi_uncertainty=est.xi_uncertainty, fit_sizes=est.fit_sizes,
                      failed_rows=est.failed_rows, rows=[r.model_dump() for r in est.rows],
                      aggregates=[a.model_dump() for a in est.aggregates])


@router.post("/solve")
async def solve_cell(request: CellSolveRequest):
    """
    Solve the clamped cell problem m(ξ; A) on a submitted cloud.
    """
    return await run_blocking(_solve, request)


@router.post("/xi")
async def estimate_xi(request: XiRequest):
    """
    Normalized cell values over sizes, seeds and directions.
    """
    return await run_blocking(_xi, request)
