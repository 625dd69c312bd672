import pytest
from fastapi.testclient import TestClient

from app.api.endpoints.experiments import get_runner
from app.main import app
from app.services.experiment_runner import ExperimentRunner
from conftest import SMALL_CONFIG, tiny_plan_data

PREFIX = "/api/v1/experiments"


@pytest.fixture
def client(tmp_path):
    app.dependency_overrides[get_runner] = lambda: ExperimentRunner(str(tmp_path))
    yield TestClient(app)
    app.dependency_overrides.clear()


def test_health(client):
    assert client.get("/health").json() == {"status": "healthy"}
    assert client.get("/").json()["docs"] == "/docs"


def test_validate_plan(client):
    response = client.post(f"{PREFIX}/validate", json=tiny_plan_data())
    assert response.status_code == 200
    assert response.json() == {"valid": True, "experiment_id": "tiny", "variants": ["fast", "slow"], "rounds": 2}


def test_validate_reports_violations(client):
    response = client.post(f"{PREFIX}/validate", json=tiny_plan_data(rounds=0, surprise=True))
    body = response.json()
    assert body["valid"] is False
    assert any(v.startswith("rounds:") for v in body["violations"])
    assert any(v.startswith("surprise:") for v in body["violations"])


def test_run_and_fetch_report(client, tmp_path):
    response = client.post(f"{PREFIX}/run", json=tiny_plan_data())
    assert response.status_code == 200
    body = response.json()
    assert body["exit_code"] == 0
    assert body["failed_variants"] == []
    assert sorted(v["name"] for v in body["report"]["variants"]) == ["fast", "production", "slow"]
    assert (tmp_path / "tiny" / "manifest.json").exists()

    report = client.get(f"{PREFIX}/runs/tiny/report")
    assert report.status_code == 200
    assert report.json() == body["report"]


def test_invalid_run_is_rejected(client):
    response = client.post(f"{PREFIX}/run", json=tiny_plan_data(round_duration_s=0))
    assert response.status_code == 422


def test_locked_run_conflicts(client, tmp_path):
    (tmp_path / "tiny").mkdir()
    (tmp_path / "tiny" / ".flowtrial.lock").write_text("1")
    assert client.post(f"{PREFIX}/run", json=tiny_plan_data()).status_code == 409


def test_unknown_run(client):
    assert client.get(f"{PREFIX}/runs/nothing/report").status_code == 404
    assert client.get(f"{PREFIX}/runs/nothing/promotion").status_code == 404


def test_promotion_without_winner_conflicts(client):
    data = tiny_plan_data(
        experiment_id="same",
        variants=[{"name": "twin", "config": dict(SMALL_CONFIG)}],
        scenario={"name": "none", "events": []},
    )
    assert client.post(f"{PREFIX}/run", json=data).status_code == 200
    assert client.get(f"{PREFIX}/runs/same/promotion").status_code == 409
