from fastapi import APIRouter

from app.routes.common import run_blocking
from app.schemas.api import ExperimentRequest
from app.services.experiment_service import ExperimentService

router = APIRouter()


def _run(request: ExperimentRequest) -> dict:
    config = ExperimentService.load_config(request.config)
    return ExperimentService.run_experiment(config, request.output_dir).model_dump()


@router.post("/run")
async def run_experiment(request: ExperimentRequest):
    """
    Run an experiment config and return its manifest.
    """
    return await run_blocking(_run, request)
