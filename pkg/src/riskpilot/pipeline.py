"""Configuration-driven orchestration: ingest, transform, score, export.

A pipeline config names data sources (file + adapter), optional derived
collections with cross-collection field links, optional expression-tree
transforms, one or more model stages (test-selection or defect-prevention)
wired into an acyclic feed graph, and output actions (report render, webhook
post). Runs execute stages in dependency order and append a run record to an
append-only log; every export is written atomically (temp file + rename), so
a killed run never leaves a partial file at a final path.

Artifacts land under ``<artifacts_dir>/<pipeline>/``::

    exports/   deterministic data files (byte-identical across reruns)
    reports/   rendered per-run report documents
    runs.ndjson  append-only run log (single writer, advisory lock)
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import features, learn, risk, select, szz
from .errors import EngineError
from .expr import ExprRegistry, parse_tree
from .model import Dataset, load_records, serialize_record

ADAPTERS = ("ndjson", "telemetry_csv", "vcs_log")
STAGE_KINDS = ("rbt", "defect_prevention")
REPORT_TEMPLATES = ("rbt_summary", "defect_summary")
OUTPUT_KINDS = ("report", "webhook")


class ParseError(EngineError):
    code = "pipeline_parse_error"


class DanglingReference(EngineError):
    code = "pipeline_dangling_reference"


class CyclicFeed(EngineError):
    code = "pipeline_cyclic_feed"


class UnknownField(EngineError):
    code = "pipeline_unknown_field"


class UnknownTemplate(EngineError):
    code = "pipeline_unknown_template"


class UnknownPipeline(EngineError):
    code = "pipeline_unknown"


class StageFailed(EngineError):
    code = "pipeline_stage_failed"

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}", stage=stage)
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class SourceSpec:
    id: str
    adapter: str
    path: str


@dataclass(frozen=True)
class CollectionSpec:
    id: str
    source: str  # source or collection id
    where: Mapping[str, Any]
    chain: tuple[Mapping[str, str], ...]  # link hops


@dataclass(frozen=True)
class StageSpec:
    id: str
    kind: str
    options: Mapping[str, Any]
    feed: tuple[str, ...]


@dataclass(frozen=True)
class OutputSpec:
    kind: str
    options: Mapping[str, Any]


@dataclass(frozen=True)
class PipelineConfig:
    name: str
    sources: tuple[SourceSpec, ...]
    collections: tuple[CollectionSpec, ...]
    transforms: ExprRegistry
    stages: tuple[StageSpec, ...]
    outputs: tuple[OutputSpec, ...]
    base_dir: Path
    artifacts_dir: Path


@dataclass
class RunRecord:
    pipeline: str
    run_id: str
    started: str
    finished: str
    status: str  # succeeded | failed
    failed_stage: str | None
    input_digests: dict[str, str]
    artifacts: dict[str, dict[str, str]]  # name -> {path, digest}
    summary: dict[str, Any]

    def to_doc(self) -> dict:
        return {
            "pipeline": self.pipeline, "run_id": self.run_id,
            "started": self.started, "finished": self.finished,
            "status": self.status, "failed_stage": self.failed_stage,
            "input_digests": self.input_digests, "artifacts": self.artifacts,
            "summary": self.summary,
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "RunRecord":
        return cls(
            pipeline=doc["pipeline"], run_id=doc["run_id"],
            started=doc["started"], finished=doc["finished"],
            status=doc["status"], failed_stage=doc.get("failed_stage"),
            input_digests=dict(doc.get("input_digests") or {}),
            artifacts={k: dict(v) for k, v in (doc.get("artifacts") or {}).items()},
            summary=dict(doc.get("summary") or {}),
        )


Clock = Callable[[], datetime]


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def load_config(path: str | Path) -> PipelineConfig:
    """Load and fully validate a pipeline config, or fail with a located error."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, Mapping):
        raise ParseError(f"{path}: config must be a JSON object")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ParseError(f"{path}: pipeline needs a non-empty name")
    base_dir = path.parent

    sources = []
    seen_sources: set[str] = set()
    for i, raw in enumerate(doc.get("sources") or []):
        adapter = raw.get("adapter", "ndjson")
        if adapter not in ADAPTERS:
            raise DanglingReference(f"sources[{i}]: unknown adapter {adapter!r}")
        sid = raw.get("id") or f"source{i}"
        if sid in seen_sources:
            raise ParseError(f"sources[{i}]: duplicate source id {sid!r}")
        seen_sources.add(sid)
        if not raw.get("path"):
            raise ParseError(f"sources[{i}]: missing path")
        sources.append(SourceSpec(sid, adapter, raw["path"]))
    if not sources:
        raise ParseError(f"{path}: at least one source is required")

    registry = ExprRegistry()
    for i, raw in enumerate(doc.get("transforms") or []):
        tree_path = base_dir / raw["file"] if isinstance(raw, Mapping) else base_dir / raw
        if not tree_path.exists():
            raise DanglingReference(f"transforms[{i}]: no such tree file {tree_path}")
        try:
            tree_doc = json.loads(tree_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{tree_path}:{exc.lineno}: {exc.msg}") from None
        registry.add(parse_tree(tree_doc))
    registry.validate()

    known_ids = set(seen_sources)
    collections = []
    for i, raw in enumerate(doc.get("collections") or []):
        cid = raw.get("id")
        if not cid:
            raise ParseError(f"collections[{i}]: missing id")
        source = raw.get("from")
        if source not in known_ids:
            raise DanglingReference(
                f"collections[{i}]: unknown source collection {source!r}")
        chain = tuple(raw.get("chain") or ())
        for hop in chain:
            if not hop.get("field") or not hop.get("target"):
                raise ParseError(f"collections[{i}]: chain hops need field and target")
        collections.append(CollectionSpec(cid, source, raw.get("where") or {}, chain))
        known_ids.add(cid)
    for spec in collections:
        for hop in spec.chain:
            if hop["target"] not in known_ids:
                raise DanglingReference(
                    f"collection {spec.id!r}: chain targets unknown collection "
                    f"{hop['target']!r}")

    stages = []
    stage_ids: set[str] = set()
    for i, raw in enumerate(doc.get("stages") or []):
        kind = raw.get("kind")
        if kind not in STAGE_KINDS:
            raise DanglingReference(f"stages[{i}]: unknown stage kind {kind!r}")
        sid = raw.get("id") or kind
        if sid in stage_ids:
            raise ParseError(f"stages[{i}]: duplicate stage id {sid!r}")
        stage_ids.add(sid)
        options = {k: v for k, v in raw.items() if k not in ("id", "kind", "feed")}
        criteria_file = options.get("criteria_file")
        if criteria_file and not (base_dir / criteria_file).exists():
            raise DanglingReference(
                f"stages[{i}]: no such criteria file {base_dir / criteria_file}")
        for tree_ref in _criteria_tree_refs(base_dir, criteria_file):
            if tree_ref not in registry:
                raise DanglingReference(
                    f"stages[{i}]: criteria reference unknown tree {tree_ref!r}")
        stages.append(StageSpec(sid, kind, options, tuple(raw.get("feed") or ())))
    if not stages:
        raise ParseError(f"{path}: at least one stage is required")
    for stage in stages:
        for target in stage.feed:
            if target not in stage_ids:
                raise DanglingReference(
                    f"stage {stage.id!r} feeds unknown stage {target!r}")
    _check_stage_cycles(stages)

    outputs = []
    for i, raw in enumerate(doc.get("outputs") or []):
        kind = raw.get("kind")
        if kind not in OUTPUT_KINDS:
            raise DanglingReference(f"outputs[{i}]: unknown output kind {kind!r}")
        if kind == "report" and raw.get("template") not in REPORT_TEMPLATES:
            raise UnknownTemplate(
                f"outputs[{i}]: unknown report template {raw.get('template')!r}")
        if kind == "webhook" and not raw.get("url"):
            raise ParseError(f"outputs[{i}]: webhook needs a url")
        outputs.append(OutputSpec(kind, {k: v for k, v in raw.items() if k != "kind"}))

    artifacts_dir = Path(doc.get("artifacts_dir") or (base_dir / "artifacts"))
    if not artifacts_dir.is_absolute():
        artifacts_dir = base_dir / artifacts_dir
    return PipelineConfig(
        name=name, sources=tuple(sources), collections=tuple(collections),
        transforms=registry, stages=tuple(stages), outputs=tuple(outputs),
        base_dir=base_dir, artifacts_dir=artifacts_dir)


def _criteria_tree_refs(base_dir: Path, criteria_file: str | None) -> list[str]:
    if not criteria_file:
        return []
    try:
        docs = json.loads((base_dir / criteria_file).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{criteria_file}: {exc.msg}") from None
    refs = []
    for entry in docs:
        source = entry.get("source", "")
        if isinstance(source, str) and source.startswith("tree:"):
            refs.append(source[len("tree:"):])
    return refs


def _check_stage_cycles(stages: Sequence[StageSpec]) -> None:
    graph = {s.id: set(s.feed) for s in stages}
    state: dict[str, int] = {}

    def visit(node: str, trail: list[str]) -> None:
        state[node] = 1
        trail.append(node)
        for nxt in sorted(graph.get(node, ())):
            if state.get(nxt) == 1:
                cycle = trail[trail.index(nxt):] + [nxt]
                raise CyclicFeed("stage feed cycle: " + " -> ".join(cycle),
                                 cycle=cycle[:-1])
            if state.get(nxt) != 2:
                visit(nxt, trail)
        trail.pop()
        state[node] = 2

    for stage in stages:
        if state.get(stage.id) != 2:
            visit(stage.id, [])


def _stage_order(stages: Sequence[StageSpec]) -> list[StageSpec]:
    """Topological order: a stage runs before the stages it feeds."""
    by_id = {s.id: s for s in stages}
    indegree = {s.id: 0 for s in stages}
    for stage in stages:
        for target in stage.feed:
            indegree[target] += 1
    ready = sorted(sid for sid, deg in indegree.items() if deg == 0)
    order: list[StageSpec] = []
    while ready:
        sid = ready.pop(0)
        order.append(by_id[sid])
        for target in sorted(by_id[sid].feed):
            indegree[target] -= 1
            if indegree[target] == 0:
                ready.append(target)
        ready.sort()
    return order


# -- collections -----------------------------------------------------------

def link_collections(rows: Sequence[Mapping], chain: Sequence[Mapping[str, str]],
                     lookup: Mapping[str, Sequence[Mapping]]) -> tuple[list[dict], int]:
    """Left-join rows through a chain of (field -> target collection) hops.

    Joined fields are namespaced ``<target>.<field>``. Rows that miss a hop
    are kept unenriched; the miss count comes back with the rows.
    """
    current = [dict(row) for row in rows]
    misses = 0
    for hop in chain:
        field_name = hop["field"]
        target = hop["target"]
        target_field = hop.get("target_field", field_name)
        target_rows = lookup.get(target, [])
        if current and not any(field_name in row for row in current):
            raise UnknownField(f"no row carries link field {field_name!r}")
        index: dict[Any, Mapping] = {}
        for row in target_rows:
            if target_field in row and row[target_field] not in index:
                index[row[target_field]] = row
        next_rows = []
        for row in current:
            key = row.get(field_name)
            match = index.get(key)
            if match is None:
                misses += 1
                next_rows.append(row)
                continue
            merged = dict(row)
            for k, v in match.items():
                merged[f"{target}.{k}"] = v
            next_rows.append(merged)
        current = next_rows
    return current, misses


def _ingest_source(spec: SourceSpec, base_dir: Path) -> list[dict]:
    path = Path(spec.path)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise FileNotFoundError(f"source {spec.id!r}: no such file {path}")
    if spec.adapter == "ndjson":
        return [serialize_record(r) for r in load_records(str(path))]
    if spec.adapter == "telemetry_csv":
        return _telemetry_csv_rows(path)
    return _vcs_log_rows(path)


def _telemetry_csv_rows(path: Path) -> list[dict]:
    """Tabular telemetry: area,avg_distribution,avg_stickiness,window_start,window_end."""
    import csv

    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            rows.append({
                "type": "telemetry",
                "area": row["area"],
                "avg_distribution": float(row["avg_distribution"]),
                "avg_stickiness": float(row["avg_stickiness"]),
                "window_start": row["window_start"],
                "window_end": row["window_end"],
            })
    return rows


def _vcs_log_rows(path: Path) -> list[dict]:
    """Version-control log export: a JSON array of commit objects."""
    doc = json.loads(path.read_text(encoding="utf-8"))
    rows = []
    for entry in doc:
        entry = dict(entry)
        entry["type"] = "commit"
        rows.append(entry)
    return rows


def build_collections(config: PipelineConfig) -> dict[str, list[dict]]:
    collections: dict[str, list[dict]] = {}
    for source in config.sources:
        collections[source.id] = _ingest_source(source, config.base_dir)
    for spec in config.collections:
        rows = [r for r in collections[spec.source]
                if all(r.get(k) == v for k, v in spec.where.items())]
        if spec.chain:
            rows, misses = link_collections(rows, spec.chain, collections)
        collections[spec.id] = rows
    return collections


# -- artifacts -------------------------------------------------------------

def atomic_write(path: Path, data: str | bytes) -> str:
    """Write via temp file + rename; returns the content's sha256 digest."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    digest = hashlib.sha256(payload).hexdigest()
    fd, tmp_name = tempfile.mkstemp(prefix=".tmp-", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    return digest


def _digest_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunStore:
    """Append-only run log plus export/report directories for one pipeline."""

    def __init__(self, artifacts_dir: Path, pipeline: str):
        self.root = Path(artifacts_dir) / pipeline
        self.exports = self.root / "exports"
        self.reports = self.root / "reports"
        self.log_path = self.root / "runs.ndjson"

    def append(self, record: RunRecord) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record.to_doc(), sort_keys=True) + "\n"
        with open(self.log_path, "a", encoding="utf-8") as handle:
            fcntl.flock(handle.fileno(), fcntl.LOCK_EX)
            try:
                handle.write(line)
                handle.flush()
                os.fsync(handle.fileno())
            finally:
                fcntl.flock(handle.fileno(), fcntl.LOCK_UN)

    def records(self) -> list[RunRecord]:
        if not self.log_path.exists():
            return []
        records = []
        with open(self.log_path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    records.append(RunRecord.from_doc(json.loads(line)))
        return records

    def next_run_id(self) -> str:
        return f"r{len(self.records()) + 1:04d}"


def history_query(artifacts_dir: str | Path, pipeline: str,
                  since: date | None = None, until: date | None = None) -> list[dict]:
    """Chronological run summaries for the trend views."""
    store = RunStore(Path(artifacts_dir), pipeline)
    records = store.records()
    if not records:
        raise UnknownPipeline(f"no runs recorded for pipeline {pipeline!r}",
                              pipeline=pipeline)
    out = []
    for record in records:
        started = datetime.fromisoformat(record.started)
        if since is not None and started.date() < since:
            continue
        if until is not None and started.date() > until:
            continue
        out.append({
            "run_id": record.run_id,
            "started": record.started,
            "finished": record.finished,
            "status": record.status,
            "summary": record.summary,
            "artifact_digests": {name: info["digest"]
                                 for name, info in record.artifacts.items()},
        })
    return out


# -- stage execution -------------------------------------------------------

def _load_criteria(config: PipelineConfig, options: Mapping) -> list[risk.CriterionSpec]:
    criteria_file = options.get("criteria_file")
    if not criteria_file:
        return risk.default_criteria()
    docs = json.loads((config.base_dir / criteria_file).read_text(encoding="utf-8"))
    return [risk.spec_from_doc(d) for d in docs]


def _stage_today(options: Mapping, clock: Clock) -> date:
    if options.get("today"):
        return date.fromisoformat(options["today"])
    return clock().date()


def run_rbt_stage(config: PipelineConfig, data: Dataset, options: Mapping,
                  clock: Clock) -> tuple[dict[str, str], dict[str, Any]]:
    """Score, rank, select and retire. Returns export payloads and a summary."""
    today = _stage_today(options, clock)
    specs = _load_criteria(config, options)
    weighted_time = bool(options.get("weighted_time", False))
    manual = options.get("manual") or {}

    items, scores = risk.score_catalog(
        data, specs, today, registry=config.transforms, manual=manual,
        weighted_time=weighted_time)
    scores_by_id = {s.item_id: s for s in scores}

    last_tested: dict[str, date] = {}
    durations: dict[str, float] = {}
    default_duration = float(options.get("default_duration", 1.0))
    for test_id in data.tests:
        runs = data.runs_for(test_id)
        if runs:
            last_tested[test_id] = max(r.tested_on for r in runs)
        durations[test_id] = select.expected_duration(runs, default_duration)

    stale_options = options.get("stale") or {}
    thresholds = select.StaleThresholds(
        min_time_factor=float(stale_options.get("min_time_factor", 0.05)),
        min_consecutive_passes=int(stale_options.get("min_consecutive_passes", 30)),
        max_days_unexecuted=int(stale_options.get("max_days_unexecuted", 180)),
    )
    decay_window = int(options.get("decay_window_days", 30))
    stats = [
        select.stale_stats(data.tests[test_id], data.runs_for(test_id),
                           scores_by_id[test_id].time, today, decay_window)
        for test_id in sorted(data.tests)
    ]
    stale = select.flag_stale(stats, thresholds)

    budget_doc = options.get("budget") or {"kind": "count", "value": len(scores)}
    budget = select.Budget(str(budget_doc["kind"]), float(budget_doc["value"]))
    ranked = select.rank(scores, last_tested)
    plan = select.select_budget(ranked, budget, durations, stale, default_duration)

    plan_rows = select.plan_to_rows(plan)
    tsv_lines = ["rank\ttest_id\texposure\tprobability\timpact\ttime\tselected\tstale_reason"]
    for row in plan_rows:
        tsv_lines.append("\t".join([
            str(row["rank"]), row["test_id"], repr(row["exposure"]),
            repr(row["probability"]), repr(row["impact"]), repr(row["time"]),
            "1" if row["selected"] else "0", row["stale_reason"]]))

    plan_doc = select.plan_document(plan, scores_by_id, today.isoformat())
    criteria_cache = {
        "computed_on": today.isoformat(),
        "weighted_time": weighted_time,
        "default_duration": default_duration,
        "budget": {"kind": budget.kind, "value": budget.value},
        "specs": [risk.spec_to_doc(s) for s in specs],
        "items": [
            {
                "item_id": item.item_id,
                "last_tested": (last_tested.get(item.item_id).isoformat()
                                if item.item_id in last_tested else None),
                "expected_duration": durations.get(item.item_id),
                "stale_reason": stale.get(item.item_id),
                "criteria": [
                    {"name": c.spec.name, "raw": c.raw, "normalized": c.normalized}
                    for c in item.criteria
                ],
            }
            for item in items
        ],
    }

    total_hours = sum(r.duration_hours for r in data.runs)
    bugs_found = sum(len(r.found_bug_ids) for r in data.runs)
    summary = {
        "kind": "rbt",
        "total": len(plan.entries),
        "selected": plan.selected_count,
        "stale": len(stale),
        "top_exposure": max(s.exposure for s in scores),
        "mean_exposure": sum(s.exposure for s in scores) / len(scores),
        "bugs_found_per_hour": (bugs_found / total_hours) if total_hours else 0.0,
    }
    payloads = {
        "plan.tsv": "\n".join(tsv_lines) + "\n",
        "plan.json": json.dumps(plan_doc, sort_keys=True, indent=1) + "\n",
        "criteria_cache.json": json.dumps(criteria_cache, sort_keys=True, indent=1) + "\n",
    }
    return payloads, summary


def run_defect_stage(config: PipelineConfig, data: Dataset, options: Mapping,
                     clock: Clock) -> tuple[dict[str, str], dict[str, Any]]:
    """SZZ labels, feature dataset, model training, scoring, explanations."""
    if not data.commits:
        raise ParseError("defect prevention stage needs commit records")
    repo = szz.RepoModel(data.commits)
    report = szz.label_commits(
        repo, data.bugs.values(),
        suspect_partial_fixes=bool(options.get("suspect_partial_fixes", False)))
    label_map = {label.commit_id: label.is_bug_inducing for label in report.labels}

    feature_config = features.FeatureConfig(
        complexity_threshold=float(options.get("complexity_threshold", 10.0)))
    vectors = features.extract_dataset(repo, feature_config)

    import numpy as np

    X = np.stack([v.values for v in vectors])
    y = np.array([1.0 if label_map[v.commit_id] else 0.0 for v in vectors])

    train_options = options.get("train") or {}
    train_config = learn.TrainConfig(
        n_trees=int(train_options.get("n_trees", 200)),
        max_depth=int(train_options.get("max_depth", 4)),
        learning_rate=float(train_options.get("learning_rate", 0.1)),
        min_samples_leaf=int(train_options.get("min_samples_leaf", 5)),
        subsample=float(train_options.get("subsample", 1.0)),
        positive_class_weight=train_options.get("positive_class_weight"),
        seed=int(train_options.get("seed", 0)),
    )
    test_fraction = float(options.get("test_fraction", 0.25))
    train_idx, test_idx = learn.split_time_ordered(len(vectors), test_fraction)
    model = learn.train(X[train_idx], y[train_idx], train_config,
                        feature_names=features.SCHEMA_NAMES,
                        schema_version=features.SCHEMA_VERSION)

    threshold = float(options.get("threshold", 0.5))
    scores = learn.predict_proba(model, X)
    metrics: dict[str, Any]
    if len(set(y[test_idx])) == 2:
        metrics = learn.evaluate(model, X[test_idx], y[test_idx], threshold)
    else:
        metrics = {"note": "holdout lacks both classes; metrics unavailable"}

    labels_lines = ["commit_id\tis_bug_inducing\tevidence_count"]
    for label in report.labels:
        labels_lines.append(
            f"{label.commit_id}\t{1 if label.is_bug_inducing else 0}\t{len(label.evidence)}")

    scores_lines = ["commit_id\tscore\talert"]
    alerts = []
    for vector, score in zip(vectors, scores):
        flag = learn.classify(float(score), threshold)
        scores_lines.append(f"{vector.commit_id}\t{float(score)!r}\t"
                            f"{1 if flag == 'alert' else 0}")
        if flag == "alert":
            explanation = learn.explain(model, vector.values)
            alerts.append({
                "commit_id": vector.commit_id,
                "score": float(score),
                "top_features": [
                    {"feature": name, "contribution": value}
                    for name, value in explanation.top(3)
                ],
            })

    payloads = {
        "labels.tsv": "\n".join(labels_lines) + "\n",
        "suspects.txt": "".join(s + "\n" for s in report.suspects),
        "dataset.csv": features.dataset_to_csv(vectors, label_map),
        "model.json": learn.dump_model(model) + "\n",
        "metrics.json": json.dumps(metrics, sort_keys=True, indent=1) + "\n",
        "metrics.tsv": _metrics_tsv(metrics),
        "scores.tsv": "\n".join(scores_lines) + "\n",
        "alerts.json": json.dumps(alerts, sort_keys=True, indent=1) + "\n",
    }
    summary = {
        "kind": "defect_prevention",
        "commits": len(vectors),
        "inducing": int(sum(label_map.values())),
        "alerts": len(alerts),
        "threshold": threshold,
        "unlinked_bugs": len(report.unlinked_bugs),
        "macro_f1": (metrics.get("macro", {}).get("f1")
                     if isinstance(metrics.get("macro"), Mapping) else None),
    }
    return payloads, summary


def _metrics_tsv(metrics: Mapping[str, Any]) -> str:
    lines = ["metric\tprecision\trecall\tf1\tsupport"]
    if "macro" not in metrics:
        lines.append(f"note\t{metrics.get('note', 'unavailable')}\t\t\t")
        return "\n".join(lines) + "\n"
    for cls in ("positive", "negative"):
        block = metrics[cls]
        lines.append(f"{cls}\t{block['precision']!r}\t{block['recall']!r}"
                     f"\t{block['f1']!r}\t{block['support']}")
    macro = metrics["macro"]
    lines.append(f"macro\t{macro['precision']!r}\t{macro['recall']!r}"
                 f"\t{macro['f1']!r}\t")
    lines.append(f"accuracy\t{metrics['accuracy']!r}\t\t\t")
    if "roc_auc" in metrics:
        lines.append(f"roc_auc\t{metrics['roc_auc']!r}\t\t\t")
    confusion = metrics["confusion"]
    lines.append(f"confusion\ttp={confusion['tp']}\tfp={confusion['fp']}"
                 f"\tfn={confusion['fn']}\ttn={confusion['tn']}")
    return "\n".join(lines) + "\n"


def run_pipeline(config: PipelineConfig, clock: Clock = _utc_now,
                 webhook_retry_base: float = 0.1) -> RunRecord:
    """Execute ingest, stages (in feed order) and outputs; append the record.

    Stage errors abort the run; the failed record (naming the stage) is still
    appended so the history shows the failure.
    """
    store = RunStore(config.artifacts_dir, config.name)
    run_id = store.next_run_id()
    started = clock().isoformat()
    artifacts: dict[str, dict[str, str]] = {}
    summary: dict[str, Any] = {}
    input_digests: dict[str, str] = {}
    failed_stage: str | None = None

    try:
        for source in config.sources:
            path = Path(source.path)
            if not path.is_absolute():
                path = config.base_dir / path
            if not path.exists():
                raise StageFailed("ingest", FileNotFoundError(f"no such file {path}"))
            input_digests[source.id] = _digest_file(path)

        try:
            collections = build_collections(config)
        except EngineError as exc:
            raise StageFailed("collections", exc) from exc
        except (OSError, ValueError, KeyError) as exc:
            raise StageFailed("ingest", exc) from exc

        all_rows = [row for source in config.sources for row in collections[source.id]]
        from .model import validate_record

        data = Dataset.from_records(validate_record(r) for r in all_rows)

        for stage in _stage_order(config.stages):
            try:
                if stage.kind == "rbt":
                    payloads, stage_summary = run_rbt_stage(
                        config, data, stage.options, clock)
                else:
                    payloads, stage_summary = run_defect_stage(
                        config, data, stage.options, clock)
            except StageFailed:
                raise
            except Exception as exc:
                raise StageFailed(stage.id, exc) from exc
            for name, payload in payloads.items():
                target = store.exports / name
                digest = atomic_write(target, payload)
                artifacts[name] = {"path": str(target), "digest": digest}
            summary[stage.id] = stage_summary

        record = RunRecord(
            pipeline=config.name, run_id=run_id, started=started,
            finished=clock().isoformat(), status="succeeded", failed_stage=None,
            input_digests=input_digests, artifacts=artifacts, summary=summary)

        for output in config.outputs:
            try:
                _run_output(config, store, record, output, webhook_retry_base)
            except EngineError as exc:
                raise StageFailed(f"output:{output.kind}", exc) from exc
        store.append(record)
        return record
    except StageFailed as exc:
        failed_stage = exc.stage
        record = RunRecord(
            pipeline=config.name, run_id=run_id, started=started,
            finished=clock().isoformat(), status="failed", failed_stage=failed_stage,
            input_digests=input_digests, artifacts=artifacts,
            summary={**summary, "error": str(exc)})
        store.append(record)
        raise


def _run_output(config: PipelineConfig, store: RunStore, record: RunRecord,
                output: OutputSpec, retry_base: float) -> None:
    if output.kind == "report":
        template = output.options["template"]
        text = render_report(record, template, store)
        name = f"report_{record.run_id}_{template}.md"
        target = store.reports / name
        digest = atomic_write(target, text)
        record.artifacts[name] = {"path": str(target), "digest": digest}
        return
    # webhook: POST the run summary document, 3 attempts, exponential backoff
    url = output.options["url"]
    body = json.dumps(record.to_doc(), sort_keys=True).encode("utf-8")
    last_error: Exception | None = None
    for attempt in range(3):
        try:
            request = urllib.request.Request(
                url, data=body, headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(request, timeout=10) as response:
                response.read()
            return
        except (urllib.error.URLError, OSError) as exc:
            last_error = exc
            time.sleep(retry_base * (2 ** attempt))
    raise EngineError(f"webhook {url} failed after 3 attempts: {last_error}")


# -- reports ----------------------------------------------------------------

def render_report(run: RunRecord, template: str, store: RunStore) -> str:
    """Human-readable run summary in markdown."""
    if template not in REPORT_TEMPLATES:
        raise UnknownTemplate(f"unknown report template {template!r}")
    previous = [r for r in store.records()
                if r.status == "succeeded" and r.run_id != run.run_id]
    prior = previous[-1] if previous else None

    if template == "rbt_summary":
        return _render_rbt(run, prior, store)
    return _render_defect(run, prior, store)


def _delta_line(label: str, current: float, prior_value: float | None,
                fmt: str = "{:+.2f}") -> str:
    if prior_value is None:
        return f"- {label}: {current:.2f}"
    return f"- {label}: {current:.2f} ({fmt.format(current - prior_value)})"


def _stage_summary(record: RunRecord | None, kind: str) -> dict | None:
    if record is None:
        return None
    for stage_summary in record.summary.values():
        if isinstance(stage_summary, Mapping) and stage_summary.get("kind") == kind:
            return dict(stage_summary)
    return None


def _render_rbt(run: RunRecord, prior: RunRecord | None, store: RunStore) -> str:
    summary = _stage_summary(run, "rbt") or {}
    prior_summary = _stage_summary(prior, "rbt")
    lines = [
        f"# Test selection report — run {run.run_id} ({run.pipeline})", "",
        f"- considered: {summary.get('total', 0)}",
        f"- selected: {summary.get('selected', 0)}",
        f"- stale flagged: {summary.get('stale', 0)}", "",
        "## Top 10 by exposure", "",
        "| rank | test | R | P | I | T | selected | stale |",
        "| --- | --- | --- | --- | --- | --- | --- | --- |",
    ]
    plan_path = store.exports / "plan.json"
    if plan_path.exists():
        plan = json.loads(plan_path.read_text(encoding="utf-8"))
        for entry in plan["entries"][:10]:
            lines.append(
                "| {rank} | {test_id} | {exposure:.3f} | {probability:.3f} "
                "| {impact:.3f} | {time:.3f} | {sel} | {stale} |".format(
                    rank=entry["rank"], test_id=entry["test_id"],
                    exposure=entry["exposure"], probability=entry["probability"],
                    impact=entry["impact"], time=entry["time"],
                    sel="yes" if entry["selected"] else "no",
                    stale=entry["stale_reason"] or "-"))
    lines += ["", "## Change vs previous run", ""]
    if prior_summary is None:
        lines.append("no prior run")
    else:
        lines.append(_delta_line("selected", float(summary.get("selected", 0)),
                                 float(prior_summary.get("selected", 0))))
        lines.append(_delta_line("mean exposure", float(summary.get("mean_exposure", 0.0)),
                                 float(prior_summary.get("mean_exposure", 0.0))))
        lines.append(_delta_line(
            "bugs found per hour", float(summary.get("bugs_found_per_hour", 0.0)),
            float(prior_summary.get("bugs_found_per_hour", 0.0)), "{:+.4f}"))
    return "\n".join(lines) + "\n"


def _render_defect(run: RunRecord, prior: RunRecord | None, store: RunStore) -> str:
    summary = _stage_summary(run, "defect_prevention") or {}
    prior_summary = _stage_summary(prior, "defect_prevention")
    lines = [
        f"# Defect prevention report — run {run.run_id} ({run.pipeline})", "",
        f"- commits scored: {summary.get('commits', 0)}",
        f"- labeled inducing: {summary.get('inducing', 0)}",
        f"- alerts at threshold {summary.get('threshold', 0.5)}: {summary.get('alerts', 0)}",
        "", "## Alerts", "",
    ]
    alerts_path = store.exports / "alerts.json"
    alerts = (json.loads(alerts_path.read_text(encoding="utf-8"))
              if alerts_path.exists() else [])
    if not alerts:
        lines.append("none")
    else:
        lines.append("| commit | score | top factors |")
        lines.append("| --- | --- | --- |")
        for alert in alerts:
            factors = ", ".join(
                f"{f['feature']} ({f['contribution']:+.3f})"
                for f in alert["top_features"])
            lines.append(f"| {alert['commit_id']} | {alert['score']:.3f} | {factors} |")
    lines += ["", "## Holdout metrics", ""]
    metrics_path = store.exports / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
        if "macro" in metrics:
            for cls in ("positive", "negative", "macro"):
                block = metrics[cls]
                lines.append(
                    f"- {cls}: precision {block['precision']:.3f}, "
                    f"recall {block['recall']:.3f}, f1 {block['f1']:.3f}")
            if "roc_auc" in metrics:
                lines.append(f"- roc_auc: {metrics['roc_auc']:.3f}")
        else:
            lines.append(metrics.get("note", "metrics unavailable"))
    lines += ["", "## Change vs previous run", ""]
    if prior_summary is None:
        lines.append("no prior run")
    else:
        lines.append(_delta_line("alerts", float(summary.get("alerts", 0)),
                                 float(prior_summary.get("alerts", 0))))
    return "\n".join(lines) + "\n"
