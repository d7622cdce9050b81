"""HTTP API over the engine: the backend for the tuning UI.

Endpoints::

    GET  /tests/ranked              latest selection plan with breakdowns
    POST /whatif                    re-rank under weight overrides (ephemeral)
    GET  /commits/{id}/risk         model score + alert flag for one commit
    GET  /commits/{id}/explanation  additive per-feature explanation
    POST /pipelines/{name}/run      trigger a run (async, 409 while running)
    GET  /pipelines/{name}/status   poll the trigger state
    GET  /runs?pipeline={name}      chronological run summaries

Read endpoints are side-effect free; what-if recomputation works entirely
from the cached raw criterion values the last scoring run left behind (raw
metrics do not depend on weights), so responses stay well under the 500 ms
interactive budget and nothing persisted is ever mutated. A built frontend
can be served from ``--ui-dir``; responses carry permissive CORS headers so
a separately hosted UI works too.
"""

from __future__ import annotations

import json
import threading
from datetime import date
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import features, learn, risk, select, szz
from .errors import EngineError
from .expr import tree_to_doc
from .model import Dataset, load_records
from .pipeline import (PipelineConfig, RunStore, UnknownPipeline, _digest_file,
                       history_query, run_pipeline)

API_VERSION = "1"

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".mjs": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json; charset=utf-8",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
    ".map": "application/json; charset=utf-8",
}


class ApiError(EngineError):
    code = "api_error"

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class ServiceState:
    """Shared engine state behind the handlers.

    Caches are keyed by input digests, so a completed pipeline run (which
    atomically replaces the export files) is picked up on the next request
    without ever exposing a half-updated view.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.store = RunStore(config.artifacts_dir, config.name)
        self._lock = threading.Lock()
        self._model_cache: tuple[str, learn.GbmModel] | None = None
        self._vectors_cache: tuple[str, dict[str, np.ndarray]] | None = None
        self._run_lock = threading.Lock()
        self._run_status: dict[str, dict[str, Any]] = {}

    # -- plan ---------------------------------------------------------------

    def _export(self, name: str) -> Path:
        return self.store.exports / name

    def ranked_plan(self) -> dict:
        plan_path = self._export("plan.json")
        if not plan_path.exists():
            raise ApiError(404, "no_run_yet", "no completed scoring run")
        return {"ephemeral": False,
                "plan": json.loads(plan_path.read_text(encoding="utf-8"))}

    def whatif(self, body: Mapping) -> dict:
        cache_path = self._export("criteria_cache.json")
        if not cache_path.exists():
            raise ApiError(409, "no_cached_criteria",
                           "no cached criterion values; run the pipeline first")
        cache = json.loads(cache_path.read_text(encoding="utf-8"))
        overrides = body.get("weight_overrides") or {}
        if not isinstance(overrides, Mapping):
            raise ApiError(400, "bad_request", "weight_overrides must be an object")

        specs = {doc["name"]: risk.spec_from_doc(doc) for doc in cache["specs"]}
        unknown = set(overrides) - set(specs)
        if unknown:
            raise ApiError(400, "unknown_criterion",
                           f"unknown criteria: {sorted(unknown)}")
        for name, value in overrides.items():
            if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
                raise ApiError(400, "unknown_criterion",
                               f"override for {name!r} must be a number in [0,1]")

        items = []
        last_tested: dict[str, date] = {}
        durations: dict[str, float] = {}
        stale: dict[str, str] = {}
        for entry in cache["items"]:
            criteria = tuple(
                risk.CriterionValue(specs[c["name"]], float(c["raw"]),
                                    float(c["normalized"]))
                for c in entry["criteria"])
            items.append(risk.RiskItem(entry["item_id"], criteria,
                                       cache["computed_on"]))
            if entry.get("last_tested"):
                last_tested[entry["item_id"]] = date.fromisoformat(entry["last_tested"])
            if entry.get("expected_duration") is not None:
                durations[entry["item_id"]] = float(entry["expected_duration"])
            if entry.get("stale_reason"):
                stale[entry["item_id"]] = entry["stale_reason"]

        scores = risk.rescore_with_weights(
            items, {k: float(v) for k, v in overrides.items()},
            weighted_time=bool(cache.get("weighted_time", False)))
        budget_doc = body.get("budget") or cache["budget"]
        budget = select.Budget(str(budget_doc["kind"]), float(budget_doc["value"]))
        ranked = select.rank(scores, last_tested)
        plan = select.select_budget(ranked, budget, durations, stale,
                                    float(cache.get("default_duration", 1.0)))
        doc = select.plan_document(plan, {s.item_id: s for s in scores},
                                   cache["computed_on"])
        response: dict[str, Any] = {"ephemeral": True, "plan": doc}
        if "sequence" in body:
            response["sequence"] = body["sequence"]
        return response

    # -- commit risk ---------------------------------------------------------

    def _load_model(self) -> learn.GbmModel:
        model_path = self._export("model.json")
        if not model_path.exists():
            raise ApiError(409, "no_model", "no trained model; run the pipeline first")
        digest = _digest_file(model_path)
        with self._lock:
            if self._model_cache and self._model_cache[0] == digest:
                return self._model_cache[1]
        model = learn.load_model(model_path.read_text(encoding="utf-8"))
        with self._lock:
            self._model_cache = (digest, model)
        return model

    def _load_vectors(self) -> dict[str, np.ndarray]:
        paths = []
        for source in self.config.sources:
            path = Path(source.path)
            if not path.is_absolute():
                path = self.config.base_dir / path
            if path.exists():
                paths.append(path)
        digest = "|".join(_digest_file(p) for p in paths)
        with self._lock:
            if self._vectors_cache and self._vectors_cache[0] == digest:
                return self._vectors_cache[1]
        records = []
        for path in paths:
            records.extend(load_records(str(path)))
        data = Dataset.from_records(records)
        if not data.commits:
            raise ApiError(409, "no_model", "no commit records ingested")
        repo = szz.RepoModel(data.commits)
        vectors = {v.commit_id: v.values for v in features.extract_dataset(repo)}
        with self._lock:
            self._vectors_cache = (digest, vectors)
        return vectors

    def _threshold(self) -> float:
        for stage in self.config.stages:
            if stage.kind == "defect_prevention":
                return float(stage.options.get("threshold", 0.5))
        return 0.5

    def commit_risk(self, commit_id: str, threshold: float | None) -> dict:
        model = self._load_model()
        vectors = self._load_vectors()
        if commit_id not in vectors:
            raise ApiError(404, "unknown_commit", f"commit {commit_id!r} not ingested")
        threshold = self._threshold() if threshold is None else threshold
        score = learn.predict_proba(model, vectors[commit_id])
        return {
            "commit_id": commit_id,
            "score": score,
            "alert": learn.classify(score, threshold) == "alert",
            "threshold": threshold,
        }

    def commit_explanation(self, commit_id: str) -> dict:
        model = self._load_model()
        vectors = self._load_vectors()
        if commit_id not in vectors:
            raise ApiError(404, "unknown_commit", f"commit {commit_id!r} not ingested")
        explanation = learn.explain(model, vectors[commit_id])
        return {
            "commit_id": commit_id,
            "base": explanation.base,
            "base_probability": explanation.base_probability,
            "prediction_raw": explanation.prediction_raw,
            "probability": explanation.probability,
            "contributions": [{"feature": n, "contribution": v}
                              for n, v in explanation.contributions],
            "top_features": [{"feature": n, "contribution": v}
                             for n, v in explanation.top(3)],
        }

    # -- pipeline runs ---------------------------------------------------------

    def trigger_run(self, name: str) -> dict:
        if name != self.config.name:
            raise ApiError(404, "unknown_pipeline", f"no pipeline named {name!r}")
        if not self._run_lock.acquire(blocking=False):
            raise ApiError(409, "already_running",
                           f"pipeline {name!r} is already running")
        self._run_status[name] = {"state": "queued"}

        def work() -> None:
            try:
                self._run_status[name] = {"state": "running"}
                record = run_pipeline(self.config)
                self._run_status[name] = {"state": "done", "run_id": record.run_id,
                                          "status": record.status}
            except Exception as exc:  # recorded; poll surface reports it
                self._run_status[name] = {"state": "failed", "error": str(exc)}
            finally:
                self._run_lock.release()

        threading.Thread(target=work, daemon=True).start()
        return {"pipeline": name, "state": "queued"}

    def run_status(self, name: str) -> dict:
        if name != self.config.name:
            raise ApiError(404, "unknown_pipeline", f"no pipeline named {name!r}")
        status = self._run_status.get(name) or {"state": "idle"}
        return {"pipeline": name, **status}

    def runs(self, name: str | None) -> list[dict]:
        name = name or self.config.name
        if name != self.config.name:
            raise ApiError(404, "unknown_pipeline", f"no pipeline named {name!r}")
        try:
            return history_query(self.config.artifacts_dir, name)
        except UnknownPipeline:
            return []


def _routes(state: ServiceState, method: str, path: str,
            query: Mapping[str, list[str]], body: Mapping) -> dict | list:
    parts = [p for p in path.split("/") if p]
    if method == "GET":
        if parts == ["tests", "ranked"]:
            return state.ranked_plan()
        if len(parts) == 3 and parts[0] == "commits" and parts[2] == "risk":
            threshold = query.get("threshold")
            return state.commit_risk(parts[1],
                                     float(threshold[0]) if threshold else None)
        if len(parts) == 3 and parts[0] == "commits" and parts[2] == "explanation":
            return state.commit_explanation(parts[1])
        if parts == ["runs"]:
            return state.runs(query.get("pipeline", [None])[0])
        if len(parts) == 3 and parts[0] == "pipelines" and parts[2] == "status":
            return state.run_status(parts[1])
        if parts == ["trees"]:
            registry = state.config.transforms
            return {"trees": [tree_to_doc(registry.get(name))
                              for name in registry.names()]}
        if parts == ["healthz"]:
            return {"ok": True, "api_version": API_VERSION,
                    "pipeline": state.config.name}
    if method == "POST":
        if parts == ["whatif"]:
            return state.whatif(body)
        if len(parts) == 3 and parts[0] == "pipelines" and parts[2] == "run":
            return state.trigger_run(parts[1])
    raise ApiError(404, "not_found", f"no route for {method} /{'/'.join(parts)}")


def _build_handler(state: ServiceState, ui_dir: str | None):
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "riskpilot"

        def log_message(self, *args: Any) -> None:
            pass

        def _cors(self) -> None:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")

        def _send_json(self, status: int, doc: Any) -> None:
            payload = json.dumps(doc, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.send_header("X-Api-Version", API_VERSION)
            self._cors()
            self.end_headers()
            self.wfile.write(payload)

        def _dispatch(self, method: str) -> None:
            url = urlparse(self.path)
            body: Mapping = {}
            if method == "POST":
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    body = json.loads(raw or b"{}")
                except json.JSONDecodeError:
                    self._send_json(400, {"error": "bad_request",
                                          "message": "body is not valid JSON"})
                    return
            try:
                doc = _routes(state, method, url.path, parse_qs(url.query), body)
            except ApiError as exc:
                self._send_json(exc.status, {"error": exc.code, "message": str(exc)})
            except EngineError as exc:
                self._send_json(400, exc.to_doc())
            else:
                status = 202 if (method == "POST" and "run" in url.path) else 200
                self._send_json(status, doc)

        def do_GET(self) -> None:
            url = urlparse(self.path)
            if ui_root is not None and self._maybe_static(url.path):
                return
            self._dispatch("GET")

        def do_POST(self) -> None:
            self._dispatch("POST")

        def do_OPTIONS(self) -> None:
            self.send_response(204)
            self._cors()
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _maybe_static(self, path: str) -> bool:
            assert ui_root is not None
            relative = path.lstrip("/") or "index.html"
            target = (ui_root / relative).resolve()
            try:
                target.relative_to(ui_root)
            except ValueError:
                return False
            if not target.is_file():
                return path in ("", "/")
            payload = target.read_bytes()
            self.send_response(200)
            content_type = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            self._cors()
            self.end_headers()
            self.wfile.write(payload)
            return True

    return Handler


def make_server(config: PipelineConfig, host: str = "127.0.0.1", port: int = 0,
                ui_dir: str | None = None) -> ThreadingHTTPServer:
    """Build the server; port 0 picks a free port (server.server_address)."""
    state = ServiceState(config)
    handler = _build_handler(state, ui_dir)
    server = ThreadingHTTPServer((host, port), handler)
    server.state = state  # type: ignore[attr-defined]
    return server


def serve(config: PipelineConfig, host: str = "127.0.0.1", port: int = 8787,
          ui_dir: str | None = None) -> None:
    server = make_server(config, host, port, ui_dir)
    address = server.server_address
    print(f"riskpilot service on http://{address[0]}:{address[1]} "
          f"(pipeline {config.name!r})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
