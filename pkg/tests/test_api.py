import pytest
from httpx import ASGITransport, AsyncClient

from app.main import app


@pytest.fixture
async def client():
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as c:
        yield c


async def _lattice(client, side, spacing=1.0):
    r = await client.post("/api/v1/clouds/sample", json={
        "window": {"width": side, "height": side}, "mode": "lattice", "spacing": spacing})
    assert r.status_code == 200
    return r.json()


async def test_health(client):
    r = await client.get("/health")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


async def test_sample_poisson_is_reproducible(client):
    body = {"window": {"width": 5, "height": 5}, "intensity": 2.0, "padding": 1.0, "seed": 9}
    a = (await client.post("/api/v1/clouds/sample", json=body)).json()
    b = (await client.post("/api/v1/clouds/sample", json=body)).json()
    assert a["points"] == b["points"]
    assert a["window"]["width"] == 7.0
    assert a["seed"] == 9


async def test_sample_lattice(client):
    cloud = await _lattice(client, 4.0)
    assert len(cloud["points"]) == 16
    assert cloud["ids"] == list(range(16))


async def test_energy_of_affine_field(client):
    cloud = await _lattice(client, 6.0)
    r = await client.post("/api/v1/clouds/energy", json={
        "cloud": cloud, "region": {"width": 2, "height": 2}, "radius": 1.2, "xi": [1.0, 0.0]})
    assert r.status_code == 200
    assert r.json() == {"energy": 8.0, "points_in_region": 4, "boundary_points": 8}


async def test_energy_errors(client):
    cloud = await _lattice(client, 4.0)
    r = await client.post("/api/v1/clouds/energy", json={
        "cloud": cloud, "region": {"width": 2, "height": 2}, "radius": 1.2})
    assert r.status_code == 400
    r = await client.post("/api/v1/clouds/energy", json={
        "cloud": cloud, "region": {"width": 2, "height": 2}, "radius": 1.2, "xi": [1.0, 0.0]})
    assert r.status_code == 400
    assert "enlargement" in r.json()["detail"]
    r = await client.post("/api/v1/clouds/energy", json={"cloud": cloud, "region": {"width": 2, "height": 2}})
    assert r.status_code == 422


async def test_cell_solve(client):
    cloud = await _lattice(client, 14.0)
    r = await client.post("/api/v1/cell/solve", json={"cloud": cloud, "T": 10, "lam": 1.2, "return_field": True})
    assert r.status_code == 200
    body = r.json()
    assert body["m"] == pytest.approx(200.0)
    assert body["residual"] <= 1e-10
    assert len(body["field"]["values"]) == 196


async def test_cell_solve_needs_a_region(client):
    cloud = await _lattice(client, 4.0)
    r = await client.post("/api/v1/cell/solve", json={"cloud": cloud, "lam": 1.2})
    assert r.status_code == 400


async def test_xi(client):
    r = await client.post("/api/v1/cell/xi", json={"sizes": [6], "seeds": 1, "lam": 1.2, "mode": "lattice"})
    assert r.status_code == 200
    body = r.json()
    assert body["xi_estimate"] == pytest.approx(2.0)
    assert len(body["rows"]) == 1 and body["failed_rows"] == 0
    r = await client.post("/api/v1/cell/xi", json={"sizes": [4], "lam": 1.2})
    assert r.status_code == 400


async def test_grid_failure_is_reported(client):
    cloud = await _lattice(client, 1.4, spacing=0.05)
    r = await client.post("/api/v1/grid/assemble", json={
        "cloud": cloud, "eps": 0.05, "t": 0.25, "alpha": 0.05, "lam": 2.0, "block_factor": 10})
    assert r.status_code == 200
    body = r.json()
    assert body["success"] is False
    assert body["failure"]["reason"].startswith("M=0")


async def test_grid_construction_is_validated(client):
    cloud = await _lattice(client, 1.4, spacing=0.05)
    base = {"cloud": cloud, "eps": 0.05, "t": 0.25, "alpha": 0.05, "lam": 2.0, "block_factor": 10}
    r = await client.post("/api/v1/grid/assemble", json={**base, "construction": "spiral"})
    assert r.status_code == 422
    r = await client.post("/api/v1/grid/assemble", json={**base, "construction": "junction"})
    assert r.status_code == 200
    assert r.json()["success"] is False


async def test_converge(client):
    cloud = await _lattice(client, 20.0)
    q = {"center": [0.0, 0.0], "width": 20.0, "height": 20.0, "angle": 0.0}
    grid = {"eps": 1.0, "t": 20.0, "lambda": 1.0, "alpha": 0.1, "upsilon": 1.0, "k_t": 1, "domain": q,
            "working": q, "horizontal": [[[210]]], "vertical": [[]]}
    r = await client.post("/api/v1/grid/converge", json={
        "cloud": cloud, "values": [0.0] * 400, "grid": grid, "reference": "quadratic"})
    assert r.status_code == 200
    row = r.json()["rows"][0]
    assert row["l2_distance"] == pytest.approx(0.2)
    assert row["grid_points"] == 1


async def test_run_experiment(client, tmp_path):
    r = await client.post("/api/v1/experiments/run", json={
        "config": {"kind": "percolation-sweep", "params": {"probabilities": [1.0], "width": 4, "fields": 2}},
        "output_dir": str(tmp_path)})
    assert r.status_code == 200
    names = {f["name"] for f in r.json()["files"]}
    assert names == {"percolation.csv", "percolation_summary.csv"}
    assert (tmp_path / "manifest.json").exists()


async def test_bad_experiment_config(client, tmp_path):
    r = await client.post("/api/v1/experiments/run", json={
        "config": {"kind": "xi-sweep", "params": {"bogus": 1}}, "output_dir": str(tmp_path)})
    assert r.status_code == 400
    assert "bogus" in r.json()["detail"]
