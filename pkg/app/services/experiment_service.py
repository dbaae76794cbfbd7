import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import TypeAdapter, ValidationError

from app.core.config import settings
from app.core.exceptions import HomogenizationError, InvalidInputError, SchemaMismatchError
from app.core.formats import read_csv, sha256_file, write_csv, write_json
from app.core.rng import ALGORITHM, RandomStream
from app.schemas.cell import XiEstimate, XiPlan
from app.schemas.cloud import PointCloud, SamplingSpec, ScalarField, Window
from app.schemas.coarse import CONVERGENCE_HEADER, ConvergenceRow, ReferenceFunction
from app.schemas.experiment import (
    ConvergenceConfig,
    ExperimentConfig,
    ExperimentManifest,
    GridParams,
    GridSuccessConfig,
    IsotropyConfig,
    LatticeOracleConfig,
    ManifestFile,
    PercolationSweepConfig,
    XiSweepConfig,
)
from app.services.cell_service import XI_CSV_HEADER, CellProblemService
from app.services.coarse_service import CoarseGrainService
from app.services.geometry_service import GeometryService
from app.services.grid_service import GridService
from app.services.percolation_service import PercolationService
from app.services.sampling_service import SamplingService

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# name -> (version, header)
SCHEMAS: Dict[str, Tuple[int, List[str]]] = {
    "xi_rows": (1, XI_CSV_HEADER + ["affine_normalized", "status"]),
    "xi_summary": (1, ["T", "n", "mean", "std", "direction_spread"]),
    "isotropy": (1, ["T", "direction", "xi_x", "xi_y", "mean", "relative_spread"]),
    "lattice_oracle": (1, ["T", "xi_x", "xi_y", "m_normalized", "oracle", "relative_error", "residual"]),
    "percolation": (1, ["p", "field", "crossings"]),
    "percolation_summary": (1, ["p", "fields", "mean_crossings", "crossing_probability"]),
    "grid_success": (1, ["seed", "success", "M", "passed", "failed", "upsilon_length", "upsilon_count",
                         "reason"]),
    "convergence": (1, CONVERGENCE_HEADER),
}

_config_adapter = TypeAdapter(ExperimentConfig)


def _error_fields(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())


def grid_cloud(params: GridParams, eps: float, stream: RandomStream) -> PointCloud:
    """η_ε around the working square of Q_side, padded so the working square has no clip-boundary cells."""
    partition = CoarseGrainService.square_partition(Window.square(params.domain_side), params.t)
    side = partition.working.width
    pad = 4 * max(params.lam, params.spacing) * eps
    if params.mode == "lattice":
        h = params.spacing
        cells = math.ceil(pad / (eps * h))
        window = Window.square(side / eps + 2 * cells * h, tuple(np.asarray(partition.working.center) / eps))
        cloud = SamplingService.lattice_cloud(window, h, params.jitter, stream)
        return SamplingService.scale(cloud, eps)
    spec = SamplingSpec(window=Window.square(side + 2 * pad, partition.working.center),
                        intensity=params.gamma / eps ** 2, padding=0.0, stream=stream)
    return SamplingService.sample_poisson(spec)


class ExperimentService:

    # --- Config ---
    @staticmethod
    def load_config(source: Union[str, Path, Dict[str, Any]]) -> Any:
        if not isinstance(source, dict):
            try:
                source = json.loads(Path(source).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise InvalidInputError(f"cannot read config: {e}")
        try:
            return _config_adapter.validate_python(source)
        except ValidationError as e:
            raise InvalidInputError(f"invalid experiment config: {_error_fields(e)}")

    @staticmethod
    def apply_overrides(config: Any, **overrides) -> Any:
        """CLI flags win over the file; ``None`` leaves a field untouched."""
        data = config.model_dump(mode="json")
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
        return ExperimentService.load_config(data)

    # --- Runners ---
    @staticmethod
    def _xi_plan(config) -> XiPlan:
        p = config.params
        return XiPlan(sizes=p.sizes, seeds=list(range(p.seeds)), directions=p.directions, lam=p.lam,
                      gamma=p.gamma, tol=p.tol, mode=p.mode, spacing=p.spacing, jitter=p.jitter,
                      master_seed=config.master_seed, threads=config.threads)

    @staticmethod
    def _xi_row_table(estimate: XiEstimate) -> List[List[Any]]:
        return [[r.T, r.seed, r.xi_x, r.xi_y, r.m, r.m_normalized, r.residual, r.iters, r.affine_normalized,
                 r.status] for r in estimate.rows]

    @staticmethod
    def _run_xi_sweep(config: XiSweepConfig) -> Dict[str, Iterable]:
        estimate = CellProblemService.estimate_xi(ExperimentService._xi_plan(config))
        summary = [[a.T, a.n, a.mean, a.std, a.direction_spread] for a in estimate.aggregates]
        return {"xi_rows": ExperimentService._xi_row_table(estimate), "xi_summary": summary}

    @staticmethod
    def _run_isotropy(config: IsotropyConfig) -> Dict[str, Iterable]:
        estimate = CellProblemService.estimate_xi(ExperimentService._xi_plan(config))
        rows = []
        for a in estimate.aggregates:
            for k, d in enumerate(config.params.directions):
                rows.append([a.T, k, d[0], d[1], a.direction_means[k], a.direction_spread])
        return {"xi_rows": ExperimentService._xi_row_table(estimate), "isotropy": rows}

    @staticmethod
    def _run_lattice_oracle(config: LatticeOracleConfig) -> Dict[str, Iterable]:
        p = config.params
        plan = XiPlan(sizes=p.sizes, seeds=[0], directions=p.directions, lam=p.lam, tol=p.tol, mode="lattice",
                      spacing=p.spacing, master_seed=config.master_seed, threads=config.threads)
        estimate = CellProblemService.estimate_xi(plan)
        rows = []
        for r in estimate.rows:
            oracle = CellProblemService.lattice_xi(p.lam, p.spacing, (r.xi_x, r.xi_y))
            rows.append([r.T, r.xi_x, r.xi_y, r.m_normalized, oracle, abs(r.m_normalized - oracle) / oracle,
                         r.residual])
        return {"lattice_oracle": rows}

    @staticmethod
    def _run_percolation(config: PercolationSweepConfig) -> Dict[str, Iterable]:
        p = config.params
        master = RandomStream(seed=config.master_seed)
        shape = (p.width, p.height)
        rows, summary = [], []
        for k, prob in enumerate(p.probabilities):
            counts = []
            for f in range(p.fields):
                field = PercolationService.bernoulli_field(shape, prob, master.derive(k).derive(f))
                n = len(PercolationService.find_crossings(field, None, "h", strategy=p.strategy))
                counts.append(n)
                rows.append([prob, f, n])
            counts = np.asarray(counts)
            summary.append([prob, p.fields, float(counts.mean()), float(np.mean(counts > 0))])
            logger.info(f"🧮 p={prob}: mean crossings {counts.mean():.2f} on {shape[0]}x{shape[1]}")
        return {"percolation": rows, "percolation_summary": summary}

    @staticmethod
    def _grid_row(config: GridSuccessConfig, seed: int) -> List[Any]:
        p = config.params
        stream = RandomStream(seed=config.master_seed).derive(seed)
        try:
            cloud = grid_cloud(p, p.eps, stream)
            diagram = GeometryService.voronoi_diagram(cloud)
            mask = GeometryService.regular_subcluster(cloud, diagram, p.alpha, p.lam, scale=p.eps)
            result = GridService.assemble_grid(cloud, p.eps, p.t, p.alpha, p.lam, p.block_factor, p.upsilon,
                                               Window.square(p.domain_side), diagram, mask, p.strategy, threads=1,
                                               construction=p.construction)
        except HomogenizationError as e:
            return [seed, False, 0, False, "", math.nan, math.nan, e.message]
        if not result.success:
            return [seed, False, 0, False, "", math.nan, math.nan, result.failure.reason]
        report = GridService.validate_grid(result.grid, cloud, diagram, mask)
        return [seed, True, result.grid.M, report.passed, ";".join(report.failed()), report.upsilon_length,
                report.upsilon_count, ""]

    @staticmethod
    def _run_grid_success(config: GridSuccessConfig) -> Dict[str, Iterable]:
        seeds = list(range(config.params.seeds))
        workers = config.threads or settings.HOMOG_THREADS
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda s: ExperimentService._grid_row(config, s), seeds))
        ok = sum(1 for r in rows if r[1] and r[3])
        logger.info(f"✅ Grid success: {ok}/{len(rows)} seeds assembled and validated")
        return {"grid_success": rows}

    @staticmethod
    def _run_convergence(config: ConvergenceConfig) -> Dict[str, Iterable]:
        p = config.params
        reference = ReferenceFunction(kind=p.reference)
        master = RandomStream(seed=config.master_seed).derive(p.seed)
        entries, failed = [], []
        for k, eps in enumerate(p.eps_list):
            cloud = grid_cloud(p, eps, master.derive(k))
            diagram = GeometryService.voronoi_diagram(cloud)
            mask = GeometryService.regular_subcluster(cloud, diagram, p.alpha, p.lam, scale=eps)
            result = GridService.assemble_grid(cloud, eps, p.t, p.alpha, p.lam, p.block_factor, p.upsilon,
                                               Window.square(p.domain_side), diagram, mask, p.strategy,
                                               threads=config.threads, construction=p.construction)
            if not result.success:
                logger.warning(f"⚠️ ε={eps:g}: grid assembly failed ({result.failure.reason})")
                failed.append(eps)
                continue
            entries.append((eps, p.t, ScalarField.from_function(cloud, reference), result.grid, diagram))
        plan = f"eps={p.eps_list}; t={p.t}; one realization per eps; failed eps={failed}"
        report = CoarseGrainService.convergence_report(entries, reference, sampling_plan=plan)
        rows = report.rows + [ConvergenceRow(eps=eps, t=p.t, k_t=0, grid_points=0, l2_distance=math.nan,
                                             tg_distance=math.nan, flagged_squares=0, skipped_measure=math.nan)
                              for eps in failed]
        rows.sort(key=lambda r: -r.eps)
        return {"convergence": [[r.eps, r.t, r.k_t, r.grid_points, r.l2_distance, r.tg_distance,
                                 r.flagged_squares, r.skipped_measure] for r in rows]}

    _RUNNERS = {
        "xi-sweep": "_run_xi_sweep",
        "isotropy": "_run_isotropy",
        "lattice-oracle": "_run_lattice_oracle",
        "percolation-sweep": "_run_percolation",
        "grid-success": "_run_grid_success",
        "convergence": "_run_convergence",
    }

    @staticmethod
    def run_experiment(config: Any, output_dir: Optional[Union[str, Path]] = None) -> ExperimentManifest:
        """Run one experiment kind, write its CSVs and a manifest with content hashes."""
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        logger.info(f"🚀 Running experiment '{config.kind}' into {out}")
        runner = getattr(ExperimentService, ExperimentService._RUNNERS[config.kind])
        tables = runner(config)

        manifest = ExperimentManifest(kind=config.kind, rng=ALGORITHM, config=config.model_dump(mode="json"))
        for name, rows in tables.items():
            version, header = SCHEMAS[name]
            path = out / f"{name}.csv"
            n = write_csv(path, header, rows)
            manifest.files.append(ManifestFile(name=path.name, schema_name=name, version=version, rows=n,
                                               sha256=sha256_file(path)))
        write_json(out / MANIFEST_NAME, manifest.model_dump(mode="json"))
        logger.info(f"✅ Experiment '{config.kind}' wrote {len(manifest.files)} files")
        return manifest

    # --- Manifests ---
    @staticmethod
    def read_manifest(path: Union[str, Path]) -> ExperimentManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            return ExperimentManifest.model_validate_json(path.read_text())
        except OSError as e:
            raise InvalidInputError(f"cannot read manifest: {e}")
        except ValidationError as e:
            raise InvalidInputError(f"invalid manifest: {_error_fields(e)}")

    @staticmethod
    def report(path: Union[str, Path]) -> Dict[str, Any]:
        """Re-hash every listed file and compare row counts."""
        path = Path(path)
        base = path if path.is_dir() else path.parent
        manifest = ExperimentService.read_manifest(path)
        files = []
        for f in manifest.files:
            target = base / f.name
            exists = target.exists()
            rows = len(read_csv(target)[1]) if exists else None
            files.append({
                "name": f.name, "schema": f.schema_name, "version": f.version, "rows": rows,
                "sha256_ok": exists and sha256_file(target) == f.sha256, "rows_ok": rows == f.rows,
            })
        ok = all(f["sha256_ok"] and f["rows_ok"] for f in files)
        if not ok:
            logger.warning(f"⚠️ Manifest {path} does not match the files on disk")
        return {"kind": manifest.kind, "rng": manifest.rng, "files": files, "ok": ok}

    @staticmethod
    def concat_csv(manifests: Sequence[Union[str, Path]], schema_name: str, out_path: Union[str, Path]) -> int:
        """Concatenate one schema's CSV across runs; mixed versions or headers are refused."""
        if schema_name not in SCHEMAS:
            raise InvalidInputError(f"unknown schema '{schema_name}'")
        header, rows, versions = None, [], set()
        for m in manifests:
            m = Path(m)
            base = m if m.is_dir() else m.parent
            entry = [f for f in ExperimentService.read_manifest(m).files if f.schema_name == schema_name]
            if not entry:
                raise InvalidInputError(f"{m} has no '{schema_name}' file")
            versions.add(entry[0].version)
            h, body = read_csv(base / entry[0].name)
            if header is not None and h != header:
                raise SchemaMismatchError(f"header mismatch for '{schema_name}' in {m}")
            header = h
            rows.extend(body)
        if len(versions) > 1:
            raise SchemaMismatchError(f"refusing to concatenate '{schema_name}' across versions {sorted(versions)}")
        return write_csv(out_path, header, rows)
