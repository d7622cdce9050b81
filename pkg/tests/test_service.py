"""HTTP API: plans, what-if re-ranking, commit risk, runs, static UI."""

import json
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest
import requests

from riskpilot import learn, pipeline, service

FIXTURE = Path(__file__).parent.parent / "fixtures" / "demo"


def _start(config, ui_dir=None):
    server = service.make_server(config, port=0, ui_dir=ui_dir)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    return server, f"http://{host}:{port}"


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    """Demo fixture with one completed run, served over HTTP."""
    root = tmp_path_factory.mktemp("svc")
    demo = root / "demo"
    shutil.copytree(FIXTURE, demo)
    config = pipeline.load_config(demo / "pipeline.json")
    pipeline.run_pipeline(config)
    server, base = _start(config)
    yield {"base": base, "config": config, "server": server, "dir": demo}
    server.shutdown()


@pytest.fixture()
def fresh(tmp_path):
    """Demo fixture with no runs at all."""
    demo = tmp_path / "demo"
    shutil.copytree(FIXTURE, demo)
    config = pipeline.load_config(demo / "pipeline.json")
    server, base = _start(config)
    yield {"base": base, "config": config, "server": server}
    server.shutdown()


def test_ranked_plan_complete(live):
    response = requests.get(live["base"] + "/tests/ranked")
    assert response.status_code == 200
    plan = response.json()["plan"]
    ranks = [e["rank"] for e in plan["entries"]]
    assert ranks == list(range(1, len(ranks) + 1))
    on_disk = json.loads(
        (live["dir"] / "artifacts" / "demo" / "exports" / "plan.json").read_text())
    assert [e["test_id"] for e in plan["entries"]] \
        == [e["test_id"] for e in on_disk["entries"]]


def test_ranked_404_before_any_run(fresh):
    response = requests.get(fresh["base"] + "/tests/ranked")
    assert response.status_code == 404
    assert response.json()["error"] == "no_run_yet"


def test_whatif_empty_overrides_byte_identical(live):
    ranked = requests.get(live["base"] + "/tests/ranked").json()
    whatif = requests.post(live["base"] + "/whatif",
                           json={"weight_overrides": {}}).json()
    assert whatif["ephemeral"] is True
    assert (json.dumps(whatif["plan"], sort_keys=True)
            == json.dumps(ranked["plan"], sort_keys=True))


def test_whatif_uniform_scaling_keeps_ranking(live):
    ranked = requests.get(live["base"] + "/tests/ranked").json()["plan"]
    cache = json.loads((live["dir"] / "artifacts" / "demo" / "exports"
                        / "criteria_cache.json").read_text())
    overrides = {s["name"]: s["weight"] * 0.5 for s in cache["specs"]}
    whatif = requests.post(live["base"] + "/whatif",
                           json={"weight_overrides": overrides}).json()["plan"]
    assert ([e["test_id"] for e in whatif["entries"]]
            == [e["test_id"] for e in ranked["entries"]])


def test_whatif_sequence_echo_and_budget_override(live):
    whatif = requests.post(
        live["base"] + "/whatif",
        json={"weight_overrides": {}, "sequence": 42,
              "budget": {"kind": "count", "value": 3}}).json()
    assert whatif["sequence"] == 42
    selected = [e for e in whatif["plan"]["entries"] if e["selected"]]
    assert len(selected) == 3


def test_whatif_unknown_criterion_400(live):
    response = requests.post(live["base"] + "/whatif",
                             json={"weight_overrides": {"ghost": 0.5}})
    assert response.status_code == 400
    assert response.json()["error"] == "unknown_criterion"


def test_whatif_no_cache_409(fresh):
    response = requests.post(fresh["base"] + "/whatif",
                             json={"weight_overrides": {}})
    assert response.status_code == 409
    assert response.json()["error"] == "no_cached_criteria"


def test_whatif_never_mutates_persisted_plan(live):
    plan_path = live["dir"] / "artifacts" / "demo" / "exports" / "plan.json"
    before = plan_path.read_bytes()
    requests.post(live["base"] + "/whatif",
                  json={"weight_overrides": {"open_defects": 0.0}})
    assert plan_path.read_bytes() == before


def _two_test_fixture(tmp_path: Path) -> pipeline.PipelineConfig:
    records = [
        {"type": "test_case", "id": "X", "title": "x", "area": "zone",
         "automated": True, "created_on": "2025-06-01"},
        {"type": "test_case", "id": "Y", "title": "y", "area": "zone",
         "automated": True, "created_on": "2025-06-01"},
        {"type": "test_run", "test_id": "X", "status": "passed",
         "tested_on": "2025-08-31", "duration_hours": 1.0},
        {"type": "test_run", "test_id": "X", "status": "failed",
         "tested_on": "2025-08-31", "duration_hours": 1.0},
        {"type": "test_run", "test_id": "Y", "status": "failed",
         "tested_on": "2025-08-31", "duration_hours": 1.0},
        {"type": "test_run", "test_id": "Y", "status": "failed",
         "tested_on": "2025-08-31", "duration_hours": 1.0},
        {"type": "telemetry", "area": "zone", "avg_distribution": 0.5,
         "avg_stickiness": 0.5, "window_start": "2025-09-01",
         "window_end": "2025-09-28"},
    ]
    (tmp_path / "records.ndjson").write_text(
        "".join(json.dumps(r) + "\n" for r in records))
    criteria = [
        {"name": "failure_rate", "kind": "probability", "weight": 1.0,
         "normalization": {"kind": "ratio"}, "source": "script_failure_rate"},
        {"name": "special", "kind": "impact", "weight": 1.0,
         "normalization": {"kind": "passthrough"}, "source": "qx_final_target"},
        {"name": "distribution", "kind": "impact", "weight": 0.3,
         "normalization": {"kind": "ratio"}, "source": "avg_distribution"},
        {"name": "days_since", "kind": "time", "weight": 1.0,
         "normalization": {"kind": "affine", "src_lo": 0.0, "src_hi": 90.0},
         "source": "days_since_last_tested"},
    ]
    (tmp_path / "criteria.json").write_text(json.dumps(criteria))
    (tmp_path / "pipeline.json").write_text(json.dumps({
        "name": "duo",
        "sources": [{"id": "records", "adapter": "ndjson", "path": "records.ndjson"}],
        "stages": [{"id": "sel", "kind": "rbt", "criteria_file": "criteria.json",
                    "today": "2025-09-30",
                    "manual": {"X": {"special": 10.0}, "Y": {"special": 0.0}}}],
    }))
    return pipeline.load_config(tmp_path / "pipeline.json")


def test_whatif_zeroing_unique_elevator_does_not_improve_rank(tmp_path):
    config = _two_test_fixture(tmp_path)
    pipeline.run_pipeline(config)
    server, base = _start(config)
    try:
        baseline = requests.get(base + "/tests/ranked").json()["plan"]
        rank_x = next(e["rank"] for e in baseline["entries"] if e["test_id"] == "X")
        assert rank_x == 1  # "special" uniquely elevates X
        whatif = requests.post(base + "/whatif",
                               json={"weight_overrides": {"special": 0.0}}).json()
        new_rank_x = next(e["rank"] for e in whatif["plan"]["entries"]
                          if e["test_id"] == "X")
        assert new_rank_x >= rank_x
        assert new_rank_x == 2
    finally:
        server.shutdown()


# -- commit endpoints ----------------------------------------------------------

def test_commit_risk_alert_and_cli_parity(live):
    alerts = json.loads((live["dir"] / "artifacts" / "demo" / "exports"
                         / "alerts.json").read_text())
    commit_id = alerts[0]["commit_id"]
    response = requests.get(live["base"] + f"/commits/{commit_id}/risk")
    assert response.status_code == 200
    doc = response.json()
    assert doc["alert"] is True
    assert doc["threshold"] == 0.5

    model_path = live["dir"] / "artifacts" / "demo" / "exports" / "model.json"
    trained = learn.load_model(model_path.read_text())
    state = live["server"].state
    vectors = state._load_vectors()
    assert doc["score"] == learn.predict_proba(trained, vectors[commit_id])


def test_commit_risk_unknown_404(live):
    response = requests.get(live["base"] + "/commits/NOPE/risk")
    assert response.status_code == 404


def test_commit_risk_no_model_409(fresh):
    response = requests.get(fresh["base"] + "/commits/CL0001/risk")
    assert response.status_code == 409
    assert response.json()["error"] == "no_model"


def test_commit_explanation_local_accuracy(live):
    alerts = json.loads((live["dir"] / "artifacts" / "demo" / "exports"
                         / "alerts.json").read_text())
    commit_id = alerts[0]["commit_id"]
    doc = requests.get(live["base"] + f"/commits/{commit_id}/explanation").json()
    total = doc["base"] + sum(c["contribution"] for c in doc["contributions"])
    assert abs(total - doc["prediction_raw"]) < 1e-6
    assert doc["top_features"]
    score = requests.get(live["base"] + f"/commits/{commit_id}/risk").json()["score"]
    assert doc["probability"] == score


def test_explanation_matches_library(live):
    alerts = json.loads((live["dir"] / "artifacts" / "demo" / "exports"
                         / "alerts.json").read_text())
    commit_id = alerts[-1]["commit_id"]
    doc = requests.get(live["base"] + f"/commits/{commit_id}/explanation").json()
    trained = learn.load_model(
        (live["dir"] / "artifacts" / "demo" / "exports" / "model.json").read_text())
    vectors = live["server"].state._load_vectors()
    explanation = learn.explain(trained, vectors[commit_id])
    assert doc["prediction_raw"] == explanation.prediction_raw
    got = {c["feature"]: c["contribution"] for c in doc["contributions"]}
    for name, value in explanation.contributions:
        assert got[name] == value


# -- runs ------------------------------------------------------------------------

def test_runs_history_matches_log(live):
    listed = requests.get(live["base"] + "/runs", params={"pipeline": "demo"}).json()
    store = pipeline.RunStore(live["config"].artifacts_dir, "demo")
    assert [r["run_id"] for r in listed] == [r.run_id for r in store.records()]
    assert listed == sorted(listed, key=lambda r: r["started"])


def test_runs_unknown_pipeline_404(live):
    response = requests.get(live["base"] + "/runs", params={"pipeline": "ghost"})
    assert response.status_code == 404


def test_trigger_run_and_poll(fresh):
    response = requests.post(fresh["base"] + "/pipelines/demo/run")
    assert response.status_code == 202
    assert response.json()["state"] == "queued"
    deadline = time.time() + 120
    state = None
    while time.time() < deadline:
        state = requests.get(fresh["base"] + "/pipelines/demo/status").json()
        if state["state"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert state["state"] == "done", state
    runs = requests.get(fresh["base"] + "/runs").json()
    assert len(runs) == 1 and runs[0]["status"] == "succeeded"
    plan = requests.get(fresh["base"] + "/tests/ranked")
    assert plan.status_code == 200


def test_second_trigger_while_running_409(live):
    state = live["server"].state
    assert state._run_lock.acquire(blocking=False)
    try:
        response = requests.post(live["base"] + "/pipelines/demo/run")
        assert response.status_code == 409
        assert response.json()["error"] == "already_running"
    finally:
        state._run_lock.release()


def test_trigger_unknown_pipeline_404(live):
    response = requests.post(live["base"] + "/pipelines/ghost/run")
    assert response.status_code == 404


# -- cross-cutting -----------------------------------------------------------------

def test_cors_headers_and_preflight(live):
    response = requests.get(live["base"] + "/tests/ranked")
    assert response.headers["Access-Control-Allow-Origin"] == "*"
    preflight = requests.options(live["base"] + "/whatif")
    assert preflight.status_code == 204
    assert "POST" in preflight.headers["Access-Control-Allow-Methods"]


def test_concurrent_readers_consistent(live):
    def fetch(_):
        return requests.get(live["base"] + "/tests/ranked").text

    with ThreadPoolExecutor(max_workers=8) as pool:
        bodies = list(pool.map(fetch, range(16)))
    assert len(set(bodies)) == 1


def test_static_ui_serving(tmp_path):
    demo = tmp_path / "demo"
    shutil.copytree(FIXTURE, demo)
    ui = tmp_path / "ui"
    ui.mkdir()
    (ui / "index.html").write_text("<html><body>tuning</body></html>")
    (ui / "app.js").write_text("console.log('ok');")
    config = pipeline.load_config(demo / "pipeline.json")
    server, base = _start(config, ui_dir=str(ui))
    try:
        index = requests.get(base + "/")
        assert index.status_code == 200 and "tuning" in index.text
        script = requests.get(base + "/app.js")
        assert script.headers["Content-Type"].startswith("application/javascript")
        missing = requests.get(base + "/tests/ranked")
        assert missing.status_code == 404  # API still routed, no run yet
    finally:
        server.shutdown()


def test_api_version_header(live):
    response = requests.get(live["base"] + "/healthz")
    assert response.headers["X-Api-Version"] == service.API_VERSION
    doc = response.json()
    assert doc["ok"] is True
    assert doc["pipeline"] == "demo"


def test_trees_endpoint_serves_formula_documents(live):
    doc = requests.get(live["base"] + "/trees").json()
    names = [tree["name"] for tree in doc["trees"]]
    assert names == ["issue_pressure"]
    tree = doc["trees"][0]
    assert tree["inputs"] == ["open_defects", "severity_max"]
    assert tree["root"]["kind"] == "binary"
