import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import HomogenizationError, InvalidInputError
from app.core.formats import cloud_to_text, json_text, read_cloud, read_field, write_cloud, write_csv_stream
from app.core.log_config import setup_logging
from app.core.rng import RandomStream
from app.schemas.cell import XiPlan
from app.schemas.cloud import SamplingSpec, Window
from app.schemas.coarse import CONVERGENCE_HEADER, ReferenceFunction
from app.schemas.energy import EnergySpec, Kernel
from app.schemas.grid import RegularGrid
from app.services.cell_service import XI_CSV_HEADER, CellProblemService
from app.services.coarse_service import CoarseGrainService
from app.services.energy_service import EnergyService
from app.services.experiment_service import SCHEMAS, ExperimentService
from app.services.geometry_service import GeometryService
from app.services.grid_service import GridService
from app.services.sampling_service import SamplingService

logger = logging.getLogger(__name__)

_NAMED_DIRECTIONS = {
    "e1": (1.0, 0.0),
    "e2": (0.0, 1.0),
    "diag": (1 / math.sqrt(2), 1 / math.sqrt(2)),
}


def parse_direction(token: str) -> Tuple[float, float]:
    """``e1``, ``e2``, ``diag`` or ``fx,fy``."""
    if token in _NAMED_DIRECTIONS:
        return _NAMED_DIRECTIONS[token]
    try:
        fx, fy = (float(v) for v in token.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"direction must be e1, e2, diag or 'fx,fy', got '{token}'")
    return fx, fy


def _window(values: Sequence[float]) -> Window:
    cx, cy, w, h = values
    return Window(center=(cx, cy), width=w, height=h)


def _open_out(path: str):
    if path == "-":
        return sys.stdout
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    return target.open("w", newline="")


def _emit_json(payload, path: str = "-") -> None:
    fh = _open_out(path)
    try:
        fh.write(json_text(payload) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def _emit_csv(header, rows, path: str) -> int:
    fh = _open_out(path)
    try:
        return write_csv_stream(fh, header, rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


# --- Subcommands ---
def cmd_sample(args) -> int:
    stream = RandomStream(seed=args.seed)
    window = _window(args.window)
    if args.lattice is not None:
        cloud = SamplingService.lattice_cloud(window.enlarged(args.padding), args.lattice, args.jitter, stream)
    else:
        spec = SamplingSpec(window=window, intensity=args.gamma, padding=args.padding, stream=stream)
        cloud = SamplingService.sample_poisson(spec)
    if args.out == "-":
        sys.stdout.write(cloud_to_text(cloud))
    else:
        write_cloud(cloud, args.out)
    return 0


def cmd_energy(args) -> int:
    cloud = read_cloud(args.cloud)
    if args.field:
        field = read_field(args.field, cloud)
    elif args.xi:
        field = EnergyService.affine_field(cloud, args.xi)
    else:
        raise InvalidInputError("give either --field or --xi")
    kernel = Kernel(kind=args.kernel, support=args.radius / args.eps, scale=args.kernel_scale) if args.kernel else None
    spec = EnergySpec(radius=args.radius, region=_window(args.region), kernel=kernel, eps=args.eps)
    if kernel is not None:
        value = EnergyService.kernel_energy(field, spec)
    else:
        value = EnergyService.dirichlet_energy(field, spec)
    print(repr(float(value)))
    return 0


def cmd_cell(args) -> int:
    cloud = read_cloud(args.cloud)
    region = Window.square(args.T, tuple(args.center))
    sol = CellProblemService.solve_cell_problem(cloud, region, args.lam, args.xi, tol=args.tol)
    _emit_json(sol.summary(), args.out)
    return 0


def cmd_xi(args) -> int:
    plan = XiPlan(sizes=args.T, seeds=list(range(args.seeds)), directions=args.dirs, lam=args.lam,
                  gamma=args.gamma, tol=args.tol, mode="lattice" if args.lattice else "poisson",
                  spacing=args.lattice or 1.0, jitter=args.jitter, master_seed=args.master_seed,
                  threads=args.threads)
    estimate = CellProblemService.estimate_xi(plan)
    _emit_csv(XI_CSV_HEADER, CellProblemService.xi_csv_rows(estimate), args.out)
    return 0 if estimate.failed_rows == 0 else 1


def cmd_grid(args) -> int:
    cloud = read_cloud(args.cloud)
    diagram = GeometryService.voronoi_diagram(cloud)
    mask = GeometryService.regular_subcluster(cloud, diagram, args.alpha, args.lam, scale=args.eps)
    domain = _window(args.domain) if args.domain else Window.unit()
    result = GridService.assemble_grid(cloud, args.eps, args.t, args.alpha, args.lam, args.block_factor,
                                       args.upsilon, domain, diagram, mask, args.strategy, threads=args.threads,
                                       construction=args.construction)
    payload = {"success": result.success, "discarded": result.discarded, "grid": None, "failure": None,
               "validation": None}
    if not result.success:
        payload["failure"] = result.failure.model_dump()
        _emit_json(payload, args.out)
        return 1
    report = GridService.validate_grid(result.grid, cloud, diagram, mask)
    payload["grid"] = result.grid.to_json()
    payload["validation"] = report.model_dump()
    _emit_json(payload, args.out)
    return 0 if report.passed else 1


def load_grid(path: str) -> RegularGrid:
    """A grid file as written by ``grid``, or a bare grid document."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"cannot read grid: {e}")
    if "horizontal" not in data:
        data = data.get("grid")
        if not data:
            raise InvalidInputError(f"{path} holds no assembled grid")
    return RegularGrid.from_json(data)


def cmd_converge(args) -> int:
    cloud = read_cloud(args.cloud)
    field = read_field(args.field, cloud)
    grid = load_grid(args.grid)
    reference = ReferenceFunction(kind=args.ref, value=args.ref_value, xi=tuple(args.ref_xi))
    t = args.t if args.t is not None else grid.t
    report = CoarseGrainService.convergence_report([(grid.eps, t, field, grid)], reference,
                                                   sampling_plan=f"single field from {args.field}")
    _emit_csv(CONVERGENCE_HEADER, report.table(), args.out)
    return 0


def cmd_run(args) -> int:
    config = ExperimentService.load_config(args.config)
    config = ExperimentService.apply_overrides(config, master_seed=args.seed, output_dir=args.output_dir,
                                               threads=args.threads)
    manifest = ExperimentService.run_experiment(config)
    _emit_json(manifest.model_dump(mode="json"))
    return 0


def cmd_report(args) -> int:
    result = ExperimentService.report(args.manifest)
    _emit_json(result)
    return 0 if result["ok"] else 1


def cmd_concat(args) -> int:
    n = ExperimentService.concat_csv(args.manifests, args.schema, args.out)
    logger.info(f"✅ Concatenated {n} '{args.schema}' rows into {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, reload=False)
    return 0


# --- Parser ---
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homog", description=f"{settings.PROJECT_NAME} command line.")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="Sample a Poisson cloud (or a jittered lattice) into a cloud file")
    p.add_argument("--gamma", type=float, default=1.0, help="Intensity γ")
    p.add_argument("--window", type=float, nargs=4, metavar=("CX", "CY", "W", "H"), required=True)
    p.add_argument("--padding", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lattice", type=float, default=None, metavar="SPACING",
                   help="Sample a lattice of this spacing instead of a Poisson cloud")
    p.add_argument("--jitter", type=float, default=0.0, help="Lattice jitter radius (< spacing/2)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("energy", help="Discrete Dirichlet energy of a field on a region")
    p.add_argument("--cloud", required=True)
    p.add_argument("--field", default=None, help="Field file ('id value' per line)")
    p.add_argument("--xi", type=float, nargs=2, default=None, metavar=("FX", "FY"),
                   help="Use the affine field ξ·x instead of a field file")
    p.add_argument("--region", type=float, nargs=4, metavar=("CX", "CY", "W", "H"), required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--kernel", choices=["indicator", "scaled_indicator", "cone"], default=None)
    p.add_argument("--kernel-scale", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1.0, help="Scale ε for kernel energies")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("cell", help="Solve the cell problem m(ξ; Q_T)")
    p.add_argument("--cloud", required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--center", type=float, nargs=2, default=[0.0, 0.0], metavar=("CX", "CY"))
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--xi", type=float, nargs=2, default=[1.0, 0.0], metavar=("FX", "FY"))
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_cell)

    p = sub.add_parser("xi", help="Normalized cell values over sizes, seeds and directions")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--T", type=float, nargs="+", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--dirs", type=parse_direction, nargs="+", default=[(1.0, 0.0)])
    p.add_argument("--tol", type=float, default=settings.SOLVER_TOL)
    p.add_argument("--lattice", type=float, default=None, metavar="SPACING")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_xi)

    p = sub.add_parser("grid", help="Assemble and validate a regular t-grid")
    p.add_argument("--cloud", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--Lambda", dest="block_factor", type=int, default=settings.BLOCK_FACTOR)
    p.add_argument("--upsilon", type=float, default=100.0)
    p.add_argument("--domain", type=float, nargs=4, default=None, metavar=("CX", "CY", "W", "H"))
    p.add_argument("--strategy", choices=["greedy", "maxflow"], default="greedy")
    p.add_argument("--construction", choices=["strips", "junction"], default="strips")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("converge", help="Coarse-grained distance of a field to a reference function")
    p.add_argument("--cloud", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--ref", choices=["constant", "linear", "quadratic"], default="quadratic")
    p.add_argument("--ref-value", type=float, default=0.0)
    p.add_argument("--ref-xi", type=float, nargs=2, default=[1.0, 0.0], metavar=("FX", "FY"))
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("run", help="Run an experiment config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="Overrides master_seed")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="Check a manifest against the files on disk")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("concat", help="Concatenate one CSV schema across runs")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--schema", choices=sorted(SCHEMAS), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_concat)

    p = sub.add_parser("serve", help="Launch the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except HomogenizationError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return 2
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
