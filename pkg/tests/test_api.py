# tests/test_api.py
import pytest
from fastapi.testclient import TestClient

from src.core.binary import decode_map
from src.core.dependencies import get_dispatcher
from src.core.errors import CorruptJournal
from src.dispatcher.journal import MemoryJournal
from src.dispatcher.service import Dispatcher
from src.main import app
from src.pipeline.graph import Pipeline


@pytest.fixture
def dispatcher(clock):
    d = Dispatcher(journal=MemoryJournal(), worker_timeout_ms=1000, clock=clock)
    app.dependency_overrides[get_dispatcher] = lambda: d
    yield d
    app.dependency_overrides.clear()


@pytest.fixture
def client(dispatcher):
    return TestClient(app)


def _graph():
    return Pipeline.range(0, 40).batch(4).build().serialize()


def test_health_check(client):
    response = client.get("/")
    assert response.status_code == 200
    assert "running" in response.json()["message"]


def test_lists_workers(client, dispatcher):
    dispatcher.register_worker("127.0.0.1:7001")
    dispatcher.register_worker("127.0.0.1:7002")
    response = client.get("/api/v1/workers")
    assert response.status_code == 200
    workers = response.json()
    assert [w["address"] for w in workers] == ["127.0.0.1:7001", "127.0.0.1:7002"]
    assert all(w["alive"] for w in workers)
    assert workers[0]["cpu_seconds"] is None


def test_lists_and_describes_jobs(client, dispatcher):
    dispatcher.register_worker("127.0.0.1:7001")
    static = dispatcher.register_job(_graph(), "OFF", job_name="baseline")
    dynamic = dispatcher.register_job(_graph(), "DYNAMIC")

    jobs = client.get("/api/v1/jobs").json()
    assert [j["job_id"] for j in jobs] == [static.job_id, dynamic.job_id]
    assert jobs[0]["job_name"] == "baseline"
    assert jobs[0]["assignment"] is None

    job = client.get(f"/api/v1/jobs/{dynamic.job_id}").json()
    assert job["policy"] == "DYNAMIC"
    assert job["status"] == "active"
    assert [t["worker_id"] for t in job["tasks"]] == [1]
    assert job["assignment"]["pending"]


def test_unknown_job_is_404(client):
    response = client.get("/api/v1/jobs/42")
    assert response.status_code == 404
    assert response.json()["detail"] == "Unknown job 42"


def test_state_is_the_canonical_dump(client, dispatcher):
    dispatcher.register_worker("127.0.0.1:7001")
    body = client.get("/api/v1/state").json()
    assert body["last_seq"] == dispatcher.state.last_seq
    state, _ = decode_map(bytes.fromhex(body["state_hex"]))
    assert state["workers"][0]["address"] == "127.0.0.1:7001"


class _BrokenDispatcher:
    def snapshot(self):
        raise CorruptJournal("damaged record before the tail")


def test_service_errors_become_500_with_their_code():
    app.dependency_overrides[get_dispatcher] = lambda: _BrokenDispatcher()
    try:
        response = TestClient(app).get("/api/v1/jobs")
    finally:
        app.dependency_overrides.clear()
    assert response.status_code == 500
    assert response.json() == {
        "detail": "damaged record before the tail",
        "code": 404,
        "error": "CorruptJournal",
    }
