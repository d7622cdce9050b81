"""Command-line entry point.

Every subcommand is a thin wrapper over the library: parse flags, call, and
serialize. ``--format structured`` prints the library result as canonical
JSON so scripts, the service and the tests share one contract.

Exit codes: 0 success, 1 domain error (message on stderr, or a machine
readable error document in structured mode), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import date
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import features, learn, pipeline, risk, select, szz
from .errors import EngineError
from .model import Dataset, dump_records, load_records

ENV_CONFIG = "RISKPILOT_CONFIG"
ENV_ARTIFACTS = "RISKPILOT_ARTIFACTS"


def _structured(args: argparse.Namespace) -> bool:
    return getattr(args, "format", "text") == "structured"


def _emit(args: argparse.Namespace, doc: Any, text: str | None = None) -> None:
    if _structured(args):
        print(json.dumps(doc, sort_keys=True))
    elif text is not None:
        print(text)


def _write_out(path: str | None, payload: str) -> None:
    if path:
        pipeline.atomic_write(Path(path), payload)


def _config_path(args: argparse.Namespace) -> str:
    path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG)
    if not path:
        raise EngineError("no pipeline config given (flag --config or "
                          f"{ENV_CONFIG} environment variable)")
    return path


def _load_pipeline_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    config = pipeline.load_config(_config_path(args))
    artifacts = getattr(args, "artifacts", None) or os.environ.get(ENV_ARTIFACTS)
    if artifacts:
        config = pipeline.PipelineConfig(
            name=config.name, sources=config.sources, collections=config.collections,
            transforms=config.transforms, stages=config.stages, outputs=config.outputs,
            base_dir=config.base_dir, artifacts_dir=Path(artifacts))
    return config


def _dataset_from_args(args: argparse.Namespace) -> Dataset:
    return Dataset.from_records(load_records(args.records))


def _stage_options(config: pipeline.PipelineConfig, kind: str) -> dict:
    for stage in config.stages:
        if stage.kind == kind:
            return dict(stage.options)
    return {}


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    counts: dict[str, int] = {}
    for record in records:
        counts[type(record).__name__] = counts.get(type(record).__name__, 0) + 1
    if args.out:
        _write_out(args.out, dump_records(records))
    _emit(args, {"records": len(records), "by_type": counts},
          f"validated {len(records)} records "
          + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    options = _stage_options(config, "rbt")
    if args.today:
        options["today"] = args.today
    if args.budget_count:
        options["budget"] = {"kind": "count", "value": args.budget_count}
    elif args.budget_hours:
        options["budget"] = {"kind": "hours", "value": args.budget_hours}
    collections = pipeline.build_collections(config)
    from .model import validate_record

    rows = [row for source in config.sources for row in collections[source.id]]
    data = Dataset.from_records(validate_record(r) for r in rows)
    payloads, summary = pipeline.run_rbt_stage(config, data, options, pipeline._utc_now)
    if args.out:
        _write_out(args.out, payloads["plan.tsv"])
    if args.plan_json:
        _write_out(args.plan_json, payloads["plan.json"])
    _emit(args, {"summary": summary, "plan": json.loads(payloads["plan.json"])},
          f"scored {summary['total']} tests, selected {summary['selected']} "
          f"({summary['stale']} stale)")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    plan_doc = json.loads(Path(args.plan).read_text(encoding="utf-8"))
    scores = [
        risk.RiskScore(item_id=e["test_id"], probability=e["probability"],
                       impact=e["impact"], time=e["time"], exposure=e["exposure"])
        for e in plan_doc["entries"]
    ]
    stale = {e["test_id"]: e["stale_reason"] for e in plan_doc["entries"]
             if e.get("stale_reason")}
    if args.budget_hours:
        budget = select.Budget("hours", args.budget_hours)
    else:
        budget = select.Budget("count", args.budget_count or len(scores))
    ranked = select.rank(scores)
    plan = select.select_budget(ranked, budget, stale=stale,
                                default_duration=args.default_duration)
    rows = select.plan_to_rows(plan)
    payload = json.dumps({"budget": {"kind": budget.kind, "value": budget.value},
                          "entries": rows}, sort_keys=True, indent=1) + "\n"
    _write_out(args.out, payload)
    _emit(args, {"selected": plan.selected_count, "total": len(rows)},
          f"selected {plan.selected_count} of {len(rows)}")
    return 0


def cmd_szz_label(args: argparse.Namespace) -> int:
    data = _dataset_from_args(args)
    repo = szz.RepoModel(data.commits)
    report = szz.label_commits(repo, data.bugs.values(),
                               suspect_partial_fixes=args.suspect_partial_fixes)
    lines = ["commit_id\tis_bug_inducing\tevidence_count"]
    for label in report.labels:
        lines.append(f"{label.commit_id}\t{1 if label.is_bug_inducing else 0}"
                     f"\t{len(label.evidence)}")
    _write_out(args.out, "\n".join(lines) + "\n")
    if args.suspects_out:
        _write_out(args.suspects_out, "".join(s + "\n" for s in report.suspects))
    doc = {
        "labels": [{"commit_id": l.commit_id, "is_bug_inducing": l.is_bug_inducing,
                    "evidence_count": len(l.evidence)} for l in report.labels],
        "unlinked_bugs": list(report.unlinked_bugs),
        "suspects": list(report.suspects),
    }
    inducing = sum(1 for l in report.labels if l.is_bug_inducing)
    _emit(args, doc, f"labeled {len(report.labels)} commits, {inducing} inducing, "
                     f"{len(report.unlinked_bugs)} unlinked bugs")
    return 0


def cmd_extract_features(args: argparse.Namespace) -> int:
    data = _dataset_from_args(args)
    repo = szz.RepoModel(data.commits)
    config = features.FeatureConfig(complexity_threshold=args.complexity_threshold)
    vectors = features.extract_dataset(repo, config)
    labels = None
    if args.with_labels:
        report = szz.label_commits(repo, data.bugs.values())
        labels = {l.commit_id: l.is_bug_inducing for l in report.labels}
    _write_out(args.out, features.dataset_to_csv(vectors, labels))
    _emit(args, {"commits": len(vectors), "features": len(features.SCHEMA_NAMES)},
          f"extracted {len(vectors)} vectors x {len(features.SCHEMA_NAMES)} features")
    return 0


def _read_dataset_csv(path: str) -> tuple[np.ndarray, np.ndarray | None, list[str], list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    lines = [l for l in lines if l and not l.startswith("#")]
    header = lines[0].split(",")
    has_label = header[-1] == "label"
    names = header[1:-1] if has_label else header[1:]
    ids, rows, labels = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        ids.append(parts[0])
        if has_label:
            rows.append([float(v) for v in parts[1:-1]])
            labels.append(float(parts[-1]))
        else:
            rows.append([float(v) for v in parts[1:]])
    X = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.float64) if has_label else None
    return X, y, names, ids


def cmd_train(args: argparse.Namespace) -> int:
    X, y, names, _ = _read_dataset_csv(args.data)
    if y is None:
        raise EngineError("training data has no label column")
    config = learn.TrainConfig(
        n_trees=args.trees, max_depth=args.depth, learning_rate=args.learning_rate,
        min_samples_leaf=args.min_samples_leaf, subsample=args.subsample,
        positive_class_weight=args.positive_weight, seed=args.seed)
    model = learn.train(X, y, config, feature_names=names)
    _write_out(args.out, learn.dump_model(model) + "\n")
    doc = {"trees": len(model.trees), "base_score": model.base_score,
           "final_loss": model.loss_history[-1], "schema_hash": model.schema_hash()}
    _emit(args, doc, f"trained {len(model.trees)} trees, "
                     f"final loss {model.loss_history[-1]:.4f}")
    return 0


def _vector_for_commit(args: argparse.Namespace) -> tuple[learn.GbmModel, np.ndarray, str]:
    model = learn.load_model(Path(args.model).read_text(encoding="utf-8"))
    data = _dataset_from_args(args)
    repo = szz.RepoModel(data.commits)
    vectors = features.extract_dataset(repo)
    for vector in vectors:
        if vector.commit_id == args.commit_id:
            return model, vector.values, vector.commit_id
    raise EngineError(f"commit {args.commit_id!r} not found in records",
                      commit_id=args.commit_id)


def cmd_predict(args: argparse.Namespace) -> int:
    model, values, commit_id = _vector_for_commit(args)
    score = learn.predict_proba(model, values)
    flag = learn.classify(score, args.threshold)
    explanation = learn.explain(model, values)
    doc = {
        "commit_id": commit_id,
        "score": score,
        "alert": flag == "alert",
        "threshold": args.threshold,
        "top_features": [{"feature": n, "contribution": v}
                         for n, v in explanation.top(args.top)],
    }
    top_text = ", ".join(f"{n} ({v:+.3f})" for n, v in explanation.top(args.top))
    _emit(args, doc, f"{commit_id}: score {score:.4f} -> {flag} "
                     f"(threshold {args.threshold}); top: {top_text}")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    model, values, commit_id = _vector_for_commit(args)
    explanation = learn.explain(model, values)
    doc = {
        "commit_id": commit_id,
        "base": explanation.base,
        "base_probability": explanation.base_probability,
        "prediction_raw": explanation.prediction_raw,
        "probability": explanation.probability,
        "contributions": [{"feature": n, "contribution": v}
                          for n, v in explanation.contributions],
    }
    if args.out:
        _write_out(args.out, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    _emit(args, doc, f"{commit_id}: probability {explanation.probability:.4f} "
                     f"(base {explanation.base_probability:.4f})")
    return 0


def cmd_run_pipeline(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    record = pipeline.run_pipeline(config)
    _emit(args, record.to_doc(),
          f"run {record.run_id} {record.status}; artifacts: "
          + ", ".join(sorted(record.artifacts)))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    store = pipeline.RunStore(config.artifacts_dir, config.name)
    records = store.records()
    if not records:
        raise pipeline.UnknownPipeline(f"no runs recorded for {config.name!r}")
    record = records[-1]
    if args.run_id:
        matches = [r for r in records if r.run_id == args.run_id]
        if not matches:
            raise pipeline.UnknownPipeline(f"no run {args.run_id!r} recorded")
        record = matches[-1]
    text = pipeline.render_report(record, args.template, store)
    if args.out:
        _write_out(args.out, text)
    _emit(args, {"run_id": record.run_id, "template": args.template, "report": text},
          text)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve

    config = _load_pipeline_config(args)
    serve(config, host=args.host, port=args.port, ui_dir=args.ui_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskpilot",
        description="risk-based test selection and commit defect prevention")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--format", choices=["text", "structured"], default="text",
                       help="structured prints canonical JSON")
        p.add_argument("-v", "--verbose", action="store_true",
                       help="debug logging to stderr")

    p = sub.add_parser("ingest", help="validate newline-delimited records")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="compute the risk-ranked test plan")
    p.add_argument("--config")
    p.add_argument("--artifacts")
    p.add_argument("--out", help="plan TSV path")
    p.add_argument("--plan-json", help="structured plan document path")
    p.add_argument("--today")
    p.add_argument("--budget-count", type=int)
    p.add_argument("--budget-hours", type=float)
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="re-budget an existing plan document")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.add_argument("--budget-count", type=int)
    p.add_argument("--budget-hours", type=float)
    p.add_argument("--default-duration", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("szz-label", help="label bug-inducing commits")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.add_argument("--suspects-out")
    p.add_argument("--suspect-partial-fixes", action="store_true")
    common(p)
    p.set_defaults(func=cmd_szz_label)

    p = sub.add_parser("extract-features", help="build the commit feature dataset")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.add_argument("--with-labels", action="store_true")
    p.add_argument("--complexity-threshold", type=float, default=10.0)
    common(p)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train the commit risk model")
    p.add_argument("--data", required=True, help="dataset CSV with label column")
    p.add_argument("--out")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--min-samples-leaf", type=int, default=5)
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--positive-weight", type=float)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score one commit and explain it")
    p.add_argument("--model", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--commit-id", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--top", type=int, default=3)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="full additive explanation for one commit")
    p.add_argument("--model", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--commit-id", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("run-pipeline", help="execute a configured pipeline")
    p.add_argument("--config")
    p.add_argument("--artifacts")
    common(p)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("report", help="render a run report document")
    p.add_argument("--config")
    p.add_argument("--artifacts")
    p.add_argument("--template", required=True,
                   choices=list(pipeline.REPORT_TEMPLATES))
    p.add_argument("--run-id")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--config")
    p.add_argument("--artifacts")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--ui-dir", help="serve a built frontend from this directory")
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "verbose", False):
        import logging

        logging.basicConfig(level=logging.DEBUG, stream=sys.stderr,
                            format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except EngineError as exc:
        if _structured(args):
            print(json.dumps(exc.to_doc(), sort_keys=True), file=sys.stderr)
        else:
            print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
