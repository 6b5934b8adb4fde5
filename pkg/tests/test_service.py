import json

import pytest
from fastapi.testclient import TestClient

from paramark.service import StudyStore, create_app

ADMIN = {"X-Admin-Token": "sekrit"}


@pytest.fixture()
def client(tmp_path):
    app = create_app(StudyStore(tmp_path / "studies"), admin_token="sekrit")
    return TestClient(app)


def study_body(systems=("none", "eop"), n=4, raters=("r1", "r2"), seed=3):
    # generation texts deliberately carry no hint of which system made them
    return {
        "systems": list(systems),
        "generations": {
            s: {f"s{i}": f"continuation {j} of sample {i}" for i in range(n)}
            for j, s in enumerate(systems)
        },
        "prompts": {f"s{i}": f"prompt {i}" for i in range(n)},
        "sample_count": n,
        "rater_ids": list(raters),
        "seed": seed,
    }


def make_study(client, systems=("none", "eop"), n=4, raters=("r1", "r2"), seed=3):
    resp = client.post("/studies", json=study_body(systems, n, raters, seed), headers=ADMIN)
    assert resp.status_code == 200, resp.text
    return resp.json()


def test_create_requires_admin(client):
    resp = client.post("/studies", json=study_body(), headers={"X-Admin-Token": "wrong"})
    assert resp.status_code == 403
    assert resp.json()["code"] == "unauthorized"


def test_create_and_task_flow(client):
    created = make_study(client)
    sid = created["study_id"]
    assert created["num_tasks"] == 4

    resp = client.get(f"/studies/{sid}/tasks", params={"rater": "r1"})
    task = resp.json()
    assert not task["done"]
    assert set(task["metrics"]) == {
        "topic_relevance",
        "fluency",
        "ending_quality",
        "overall_preference",
    }
    assert task["prompt"].startswith("prompt")

    # submit all four metrics for this task
    for metric in task["metrics"]:
        r = client.post(
            f"/studies/{sid}/judgments",
            json={"task_id": task["task_id"], "rater_id": "r1", "metric": metric, "verdict": "left"},
        )
        assert r.status_code == 200 and r.json()["ok"]

    nxt = client.get(f"/studies/{sid}/tasks", params={"rater": "r1"}).json()
    assert nxt["task_id"] != task["task_id"]
    assert nxt["position"] == 1


def test_rater_payloads_never_name_systems(client):
    systems = ("model-none-xyzzy", "model-eop-plugh")
    sid = make_study(client, systems=systems)["study_id"]
    for rater in ("r1", "r2"):
        resp = client.get(f"/studies/{sid}/tasks", params={"rater": rater})
        text = resp.text.lower()
        for s in systems:
            assert s not in text
        assert "xyzzy" not in text and "plugh" not in text


def test_unknown_rater_rejected(client):
    sid = make_study(client)["study_id"]
    resp = client.get(f"/studies/{sid}/tasks", params={"rater": "ghost"})
    assert resp.status_code == 400
    assert "not in study" in resp.json()["message"]


def test_unknown_study_404(client):
    resp = client.get("/studies/nope/tasks", params={"rater": "r1"})
    assert resp.status_code == 404
    assert resp.json()["code"] == "not_found"


def test_bad_verdict_schema_error(client):
    sid = make_study(client)["study_id"]
    task = client.get(f"/studies/{sid}/tasks", params={"rater": "r1"}).json()
    resp = client.post(
        f"/studies/{sid}/judgments",
        json={"task_id": task["task_id"], "rater_id": "r1", "metric": "fluency", "verdict": "both"},
    )
    assert resp.status_code == 400
    assert resp.json()["code"] == "schema_error"


def test_judgment_upsert_and_report(client):
    sid = make_study(client, n=2)["study_id"]
    # complete the study for both raters, every task, all metrics
    for rater in ("r1", "r2"):
        while True:
            task = client.get(f"/studies/{sid}/tasks", params={"rater": rater}).json()
            if task["done"]:
                break
            for metric in task["metrics"]:
                client.post(
                    f"/studies/{sid}/judgments",
                    json={
                        "task_id": task["task_id"],
                        "rater_id": rater,
                        "metric": metric,
                        "verdict": "left",
                    },
                )
    resp = client.get(f"/studies/{sid}/report", headers=ADMIN)
    assert resp.status_code == 200
    report = resp.json()
    assert report["completion"]["r1"]["done"] == 2
    cell = report["win_matrices"]["fluency"]
    # every judgment was "left": decided cells complement to 100
    (a, b) = report["systems"]
    assert cell[a][b] is not None
    assert cell[a][b] + cell[b][a] == pytest.approx(100.0)
    k = report["kappas"]["fluency"][f"{a}|{b}"]
    assert k["degenerate"] and k["value"] == 1.0
    assert report["mapping"]  # unblinded mapping only here


def test_report_requires_admin(client):
    sid = make_study(client)["study_id"]
    assert client.get(f"/studies/{sid}/report").status_code == 403


def test_store_survives_restart(tmp_path):
    root = tmp_path / "studies"
    app = create_app(StudyStore(root), admin_token="sekrit")
    client = TestClient(app)
    sid = make_study(client, n=2)["study_id"]
    task = client.get(f"/studies/{sid}/tasks", params={"rater": "r1"}).json()
    client.post(
        f"/studies/{sid}/judgments",
        json={"task_id": task["task_id"], "rater_id": "r1", "metric": "fluency", "verdict": "right"},
    )

    # new app over the same directory sees the study and the judgment
    client2 = TestClient(create_app(StudyStore(root), admin_token="sekrit"))
    resumed = client2.get(f"/studies/{sid}/tasks", params={"rater": "r1"}).json()
    assert resumed["task_id"] == task["task_id"]
    assert resumed["judged"] == {"fluency": "right"}


def test_event_log_is_jsonl(tmp_path):
    root = tmp_path / "studies"
    client = TestClient(create_app(StudyStore(root), admin_token="sekrit"))
    sid = make_study(client, n=2)["study_id"]
    task = client.get(f"/studies/{sid}/tasks", params={"rater": "r1"}).json()
    client.post(
        f"/studies/{sid}/judgments",
        json={"task_id": task["task_id"], "rater_id": "r1", "metric": "fluency", "verdict": "left"},
    )
    lines = (root / f"{sid}.judgments.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert rec["task_id"] == task["task_id"]
    assert rec["verdict"] == "left"
    assert rec["timestamp"] > 0
