import json
import math
from pathlib import Path

import pytest

from app.core.exceptions import InvalidInputError, SchemaMismatchError
from app.core.formats import read_csv
from app.services.experiment_service import ExperimentService

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
XI_PARAMS = {"sizes": [6.0, 8.0, 10.0], "seeds": 10, "lam": 1.2, "mode": "lattice", "jitter": 0.1}


def _xi_config(**params):
    return ExperimentService.load_config({"kind": "xi-sweep", "params": {**XI_PARAMS, **params}})


@pytest.fixture(scope="module")
def xi_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("xi")
    manifest = ExperimentService.run_experiment(_xi_config(), out)
    return out, manifest


def test_xi_sweep_rows(xi_run):
    out, manifest = xi_run
    header, rows = read_csv(out / "xi_rows.csv")
    assert header[:8] == ["T", "seed", "xi_x", "xi_y", "m", "m_normalized", "residual", "iters"]
    assert len(rows) == 90
    assert manifest.file("xi_rows.csv").rows == 90
    assert all(r[-1] == "ok" for r in rows)
    for r in rows:
        assert 1.0 < float(r[5]) <= float(r[8]) * (1 + 1e-9)
    _, summary = read_csv(out / "xi_summary.csv")
    assert [float(s[0]) for s in summary] == [6.0, 8.0, 10.0]
    assert all(int(s[1]) == 30 for s in summary)


def test_manifest_records_config(xi_run):
    out, manifest = xi_run
    assert manifest.kind == "xi-sweep"
    assert manifest.rng == "philox4x64-10"
    assert manifest.config["params"]["seeds"] == 10
    assert (out / "manifest.json").exists()
    assert ExperimentService.report(out)["ok"]


def test_runs_are_reproducible(xi_run, tmp_path):
    out, manifest = xi_run
    again = ExperimentService.run_experiment(_xi_config(), tmp_path)
    assert again.file("xi_rows.csv").sha256 == manifest.file("xi_rows.csv").sha256


def test_seed_subset_reproduces_rows(xi_run, tmp_path):
    out, _ = xi_run
    ExperimentService.run_experiment(_xi_config(seeds=4), tmp_path)
    _, full = read_csv(out / "xi_rows.csv")
    _, part = read_csv(tmp_path / "xi_rows.csv")
    assert part == [r for r in full if int(r[1]) < 4]


def test_report_detects_tampering(xi_run, tmp_path):
    ExperimentService.run_experiment(_xi_config(sizes=[6.0], seeds=1), tmp_path)
    assert ExperimentService.report(tmp_path / "manifest.json")["ok"]
    with open(tmp_path / "xi_rows.csv", "a") as fh:
        fh.write("6,9,1,0,1,1,0,0,1,ok\n")
    report = ExperimentService.report(tmp_path)
    assert not report["ok"]
    assert not report["files"][0]["rows_ok"]


def test_unknown_fields_are_named():
    with pytest.raises(InvalidInputError, match="bogus"):
        ExperimentService.load_config({"kind": "xi-sweep", "params": {"bogus": 1}})
    with pytest.raises(InvalidInputError):
        ExperimentService.load_config({"kind": "nonsense"})


def test_load_config_from_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"kind": "percolation-sweep", "master_seed": 3}))
    config = ExperimentService.load_config(path)
    assert config.kind == "percolation-sweep" and config.master_seed == 3
    with pytest.raises(InvalidInputError):
        ExperimentService.load_config(tmp_path / "missing.json")


def test_overrides_win():
    config = ExperimentService.apply_overrides(_xi_config(), master_seed=5, threads=None)
    assert config.master_seed == 5
    assert config.threads is None


def test_concat(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ExperimentService.run_experiment(_xi_config(sizes=[6.0], seeds=1), a)
    ExperimentService.run_experiment(_xi_config(sizes=[8.0], seeds=2), b)
    n = ExperimentService.concat_csv([a, b / "manifest.json"], "xi_rows", tmp_path / "all.csv")
    assert n == 3 + 6
    with pytest.raises(InvalidInputError):
        ExperimentService.concat_csv([a], "no_such_schema", tmp_path / "x.csv")


def test_concat_refuses_mixed_versions(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        ExperimentService.run_experiment(_xi_config(sizes=[6.0], seeds=1), d)
    data = json.loads((b / "manifest.json").read_text())
    for f in data["files"]:
        f["version"] = 2
    (b / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(SchemaMismatchError):
        ExperimentService.concat_csv([a, b], "xi_rows", tmp_path / "all.csv")


def test_percolation_sweep(tmp_path):
    config = ExperimentService.load_config({"kind": "percolation-sweep", "params": {
        "probabilities": [0.5, 1.0], "width": 10, "fields": 3}})
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "percolation.csv")
    assert len(rows) == 6
    _, summary = read_csv(tmp_path / "percolation_summary.csv")
    assert float(summary[1][2]) == 10.0
    assert float(summary[1][3]) == 1.0


def test_configured_sweep_runs_on_square_fields(tmp_path):
    data = json.loads((CONFIGS / "percolation.json").read_text())
    data["params"].update(probabilities=[1.0], fields=2)
    config = ExperimentService.load_config(data)
    assert config.params.height == config.params.width == 50
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "percolation.csv")
    assert [int(r[2]) for r in rows] == [50, 50]
    _, summary = read_csv(tmp_path / "percolation_summary.csv")
    assert float(summary[0][2]) == 50.0 and float(summary[0][3]) == 1.0


def test_lattice_oracle(tmp_path):
    config = ExperimentService.load_config({"kind": "lattice-oracle", "params": {"sizes": [10.0, 12.0]}})
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "lattice_oracle.csv")
    assert len(rows) == 2
    assert all(float(r[5]) < 1e-9 for r in rows)


def test_isotropy(tmp_path):
    ExperimentService.run_experiment(
        ExperimentService.load_config({"kind": "isotropy", "params": {**XI_PARAMS, "seeds": 2}}), tmp_path)
    _, rows = read_csv(tmp_path / "isotropy.csv")
    assert len(rows) == 9
    assert all(0 <= float(r[5]) < 0.5 for r in rows)


def test_convergence_records_failed_eps(tmp_path):
    config = ExperimentService.load_config({"kind": "convergence", "params": {
        "eps_list": [0.02], "t": 0.25, "lam": 2.0, "domain_side": 0.5}})
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "convergence.csv")
    assert len(rows) == 1
    assert float(rows[0][0]) == 0.02 and int(rows[0][2]) == 0
    assert math.isnan(float(rows[0][4]))


def test_grid_success(tmp_path):
    config = ExperimentService.load_config({"kind": "grid-success", "params": {
        "seeds": 1, "domain_side": 0.5, "block_factor": 10, "mode": "lattice", "t": 0.25, "alpha": 0.05,
        "lam": 2.0}})
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "grid_success.csv")
    assert len(rows) == 1
    seed, success, m, passed = rows[0][:4]
    assert success == "1" and int(m) == 2 and passed == "1"


def test_grid_success_defaults_to_poisson_clouds(tmp_path):
    data = json.loads((CONFIGS / "grid_success.json").read_text())
    data["params"]["seeds"] = 2
    config = ExperimentService.load_config(data)
    assert config.params.mode == "poisson"
    assert ExperimentService.load_config({"kind": "grid-success"}).params.mode == "poisson"
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "grid_success.csv")
    assert len(rows) == 2
    for row in rows:
        if row[1] == "1":
            # every produced grid passes (a)-(g)
            assert row[3] == "1" and int(row[2]) >= 1
        else:
            assert row[-1]


def test_grid_success_with_junctions(tmp_path):
    config = ExperimentService.load_config({"kind": "grid-success", "params": {
        "seeds": 1, "domain_side": 0.5, "t": 0.2, "alpha": 0.05, "lam": 2.0, "block_factor": 10,
        "mode": "lattice", "construction": "junction"}})
    ExperimentService.run_experiment(config, tmp_path)
    _, rows = read_csv(tmp_path / "grid_success.csv")
    seed, success, m, passed = rows[0][:4]
    assert success == "1" and int(m) == 1 and passed == "1"
