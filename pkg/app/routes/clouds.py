from fastapi import APIRouter

from app.core.exceptions import InvalidInputError
from app.core.rng import RandomStream
from app.routes.common import run_blocking
from app.schemas.api import CloudPayload, EnergyRequest, EnergyResponse, SampleRequest
from app.schemas.cloud import SamplingSpec, ScalarField
from app.schemas.energy import EnergySpec
from app.services.energy_service import EnergyService
from app.services.sampling_service import SamplingService

router = APIRouter()


def _sample(request: SampleRequest) -> CloudPayload:
    stream = RandomStream(seed=request.seed)
    if request.mode == "lattice":
        cloud = SamplingService.lattice_cloud(request.window, request.spacing, request.jitter, stream)
    else:
        spec = SamplingSpec(window=request.window, intensity=request.intensity, padding=request.padding,
                            stream=stream)
        cloud = SamplingService.sample_poisson(spec)
    return CloudPayload.from_cloud(cloud)


def _energy(request: EnergyRequest) -> EnergyResponse:
    cloud = request.cloud.to_cloud()
    if request.values is not None:
        field = ScalarField(cloud=cloud, values=request.values)
    elif request.xi is not None:
        field = EnergyService.affine_field(cloud, request.xi)
    else:
        raise InvalidInputError("give either per-point values or an affine slope xi")
    spec = EnergySpec(radius=request.radius, region=request.region, kernel=request.kernel, eps=request.eps)
    if spec.kernel is not None:
        energy = EnergyService.kernel_energy(field, spec)
    else:
        energy = EnergyService.dirichlet_energy(field, spec)
    boundary = EnergyService.boundary_set(cloud, request.region, request.radius)
    return EnergyResponse(energy=energy, points_in_region=cloud.count_in(request.region, closed=True),
                          boundary_points=len(boundary))


@router.post("/sample", response_model=CloudPayload)
async def sample_cloud(request: SampleRequest):
    """
    Sample a Poisson cloud (or a jittered lattice) on the requested window.
    """
    return await run_blocking(_sample, request)


@router.post("/energy", response_model=EnergyResponse)
async def cloud_energy(request: EnergyRequest):
    """
    Discrete Dirichlet (or kernel) energy of a field on a region.
    """
    return await run_blocking(_energy, request)
