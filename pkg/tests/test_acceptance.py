"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Every tolerance and runtime bound is pinned here.
"""

import json
import os
import random
import shutil
import signal
import subprocess
import sys
import time
from datetime import date
from pathlib import Path

import numpy as np
import pytest

from riskpilot import features, learn, model, pipeline, risk, select, szz

from _oracles import (brute_force_shapley, oracle_inducing, plain_mean_oracle,
                      spread_oracle, weighted_mean_oracle)
from _synth import (efficacy_catalog, imbalanced_dataset, random_repo_docs,
                    random_risk_items)

FIXTURE = Path(__file__).parent.parent / "fixtures" / "demo"


def _report(criterion: str, detail: str) -> None:
    print(f"\n[ACCEPTANCE] {criterion}: PASS ({detail})")


def test_c01_equation_fidelity_randomized():
    started = time.monotonic()
    rng = np.random.default_rng(20250930)
    worst = 0.0
    for _ in range(10_000):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(1, 8))
        k = int(rng.integers(1, 8))
        p = rng.uniform(0, 10, size=m)
        i = rng.uniform(0, 10, size=n)
        t = rng.uniform(0, 1, size=k)
        wp = rng.uniform(1e-6, 1, size=m)
        wi = rng.uniform(1e-6, 1, size=n)

        P = risk.probability_factor(list(zip(p, wp)))
        I = risk.impact_factor(list(zip(i, wi)))
        T = risk.time_factor(list(t))
        R = risk.risk_exposure(P, I, T).exposure

        assert abs(P - weighted_mean_oracle(p, wp)) < 1e-9
        assert abs(I - weighted_mean_oracle(i, wi)) < 1e-9
        assert abs(T - plain_mean_oracle(t)) < 1e-9
        assert abs(R - P * I * T) < 1e-9
        assert 0.0 <= P <= 10.0 and 0.0 <= I <= 10.0
        assert 0.0 <= T <= 1.0 and 0.0 <= R <= 100.0
        worst = max(worst, abs(P - weighted_mean_oracle(p, wp)),
                    abs(I - weighted_mean_oracle(i, wi)),
                    abs(T - plain_mean_oracle(t)))
    elapsed = time.monotonic() - started
    assert elapsed < 5.0, f"took {elapsed:.2f}s, budget 5s"
    _report("C1 equation fidelity",
            f"10k cases, worst oracle gap {worst:.2e}, {elapsed:.2f}s")


def test_c02_failure_rate_worked_example():
    runs = (
        [model.TestRun("TC", model.RunStatus.PASSED, date(2025, 9, 1), 1.0)] * 3
        + [model.TestRun("TC", model.RunStatus.FAILED, date(2025, 9, 2), 1.0)] * 4
        + [model.TestRun("TC", model.RunStatus.BLOCKED, date(2025, 9, 3), 1.0)] * 3
    )
    rate = risk.failure_rate(runs)
    assert rate == 0.70
    _report("C2 failure-rate worked example", "3 passed / 4 failed / 3 blocked = 0.70")


def test_c03_ranking_invariant_under_weight_scaling():
    rng = np.random.default_rng(31)
    items = random_risk_items(rng, 1000, max_weight=0.7)
    baseline_scores = [risk.score_item(item) for item in items]
    baseline_order = [s.item_id for s in select.rank(baseline_scores)]
    spec_names = {c.spec.name: c.spec.weight for c in items[0].criteria}

    for scale in (0.5, 0.25, 1.3):
        overrides = {name: weight * scale for name, weight in spec_names.items()}
        rescored = risk.rescore_with_weights(items, overrides)
        order = [s.item_id for s in select.rank(rescored)]
        assert order == baseline_order, f"ranking changed under x{scale}"
        if scale in (0.5, 0.25):  # power-of-two scaling is float-exact
            for a, b in zip(baseline_scores, rescored):
                assert a.exposure == b.exposure
    _report("C3 ranking invariance", "1000 tests, scales 0.5 / 0.25 / 1.3")


def test_c04_selection_efficacy_vs_random():
    started = time.monotonic()
    n, k = 1100, 207
    rbt_hits = []
    random_hits = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        items, planted = efficacy_catalog(rng, n)
        scores = [risk.score_item(item) for item in items]
        ranked = select.rank(scores)
        plan = select.select_budget(ranked, select.Budget("count", k))
        planted_by_id = {f"T{i:04d}": bool(planted[i]) for i in range(n)}
        rbt_hits.append(sum(planted_by_id[t] for t in plan.selected_ids()))
        uniform = rng.choice(n, size=k, replace=False)
        random_hits.append(int(planted[uniform].sum()))
    mean_rbt = float(np.mean(rbt_hits))
    mean_random = float(np.mean(random_hits))
    elapsed = time.monotonic() - started
    assert mean_random > 0
    assert mean_rbt >= 2.0 * mean_random, (
        f"risk-ranked {mean_rbt:.1f} vs random {mean_random:.1f}")
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    _report("C4 selection efficacy",
            f"top-{k}-of-{n}: {mean_rbt:.1f} bugs vs random {mean_random:.1f} "
            f"({mean_rbt / mean_random:.2f}x), 100 seeds, {elapsed:.1f}s")


def test_c05_szz_oracle_equivalence_200_repos():
    started = time.monotonic()
    rng = random.Random(20250905)
    repos = 0
    inducing_total = 0
    for _ in range(200):
        commit_docs, bug_docs = random_repo_docs(rng, max_commits=30)
        commits = [model.validate_record(d, today=date(2025, 12, 31))
                   for d in commit_docs]
        bugs = [model.validate_record(d, today=date(2025, 12, 31))
                for d in bug_docs]
        repo = szz.RepoModel(commits)
        report = szz.label_commits(repo, bugs)
        got = {l.commit_id: l.is_bug_inducing for l in report.labels}
        want = oracle_inducing(commit_docs, bug_docs)
        assert got == want, "labels diverge from the exhaustive simulator"
        repos += 1
        inducing_total += sum(got.values())
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    _report("C5 labeling oracle equivalence",
            f"{repos} repos (renames included), {inducing_total} inducing labels, "
            f"exact match, {elapsed:.1f}s")


def test_c06_feature_extraction_guarantees():
    # streaming == batch, bit for bit
    rng = random.Random(606)
    commit_docs, _ = random_repo_docs(rng, max_commits=28)
    commits = [model.validate_record(d, today=date(2025, 12, 31))
               for d in commit_docs]
    repo = szz.RepoModel(commits)
    streamed = features.extract_dataset(repo)
    for index, commit in enumerate(repo.commits):
        history = features.UserHistory()
        for prior in streamed[:index]:
            prior_commit = repo.commit(prior.commit_id)
            history.record(prior_commit.author, prior_commit.timestamp,
                           features.history_features(prior))
        batch = features.extract_features(commit, repo, history)
        assert np.array_equal(batch.values, streamed[index].values)

    # entropy bounds with maximum at the uniform distribution
    nrng = np.random.default_rng(607)
    for _ in range(2000):
        n = int(nrng.integers(2, 15))
        counts = nrng.integers(0, 40, size=n).astype(float)
        if counts.sum() == 0:
            counts[0] = 1.0
        h = features.entropy(list(counts))
        assert 0.0 <= h <= 1.0 + 1e-12
        assert h <= features.entropy([1.0] * n) + 1e-12

    # spread vs sort oracle on 1e4 random arrays
    for _ in range(10_000):
        values = nrng.normal(0, 100, size=int(nrng.integers(1, 25)))
        assert features.spread(list(values)) == pytest.approx(
            spread_oracle(values), abs=1e-12)
    _report("C6 feature extraction",
            f"streaming==batch over {len(streamed)} commits; entropy bounds; "
            "spread oracle on 10k arrays")


def test_c07_learner_beats_majority_baseline():
    started = time.monotonic()
    train_rng = np.random.default_rng(711)
    test_rng = np.random.default_rng(712)
    X_train, y_train = imbalanced_dataset(train_rng, 200, 1200)  # ~6:1 skew
    X_test, y_test = imbalanced_dataset(test_rng, 100, 600)
    config = learn.TrainConfig(n_trees=150, max_depth=4, learning_rate=0.1, seed=11)
    trained = learn.train(X_train, y_train, config)
    report = learn.evaluate(trained, X_test, y_test)
    baseline = learn.metrics_report(y_test, np.zeros(y_test.size))
    margin = report["macro"]["f1"] - baseline["macro"]["f1"]
    assert margin >= 0.25, f"macro F1 margin {margin:.3f}"
    assert report["roc_auc"] >= 0.85, f"auc {report['roc_auc']:.3f}"

    retrained = learn.train(X_train, y_train, config)
    assert learn.dump_model(trained) == learn.dump_model(retrained)
    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget 120s"
    _report("C7 learner sanity",
            f"macro F1 {report['macro']['f1']:.3f} vs baseline "
            f"{baseline['macro']['f1']:.3f} (margin {margin:.3f}), "
            f"auc {report['roc_auc']:.3f}, deterministic, {elapsed:.1f}s")


def test_c08_metrics_arithmetic_on_hand_confusion():
    tp, fn, fp, tn = 141, 73, 147, 1068  # positives 214, negatives 1215
    y_true = np.concatenate([np.ones(tp + fn), np.zeros(fp + tn)])
    y_pred = np.concatenate([np.ones(tp), np.zeros(fn), np.ones(fp), np.zeros(tn)])
    report = learn.metrics_report(y_true, y_pred)
    assert report["positive"]["support"] == 214
    assert report["negative"]["support"] == 1215
    assert round(report["positive"]["precision"], 2) == 0.49
    assert round(report["positive"]["recall"], 2) == 0.66
    _report("C8 metrics arithmetic",
            f"minority precision {report['positive']['precision']:.4f} -> 0.49, "
            f"recall {report['positive']['recall']:.4f} -> 0.66")


def test_c09_explanation_soundness():
    rng = np.random.default_rng(909)
    X, y = imbalanced_dataset(rng, 150, 450, n_features=10)
    trained = learn.train(X, y, learn.TrainConfig(n_trees=60, max_depth=4, seed=9))
    worst = 0.0
    for _ in range(1000):
        x = rng.normal(0, 1.5, size=10)
        explanation = learn.explain(trained, x)
        gap = abs(explanation.base
                  + sum(v for _, v in explanation.contributions)
                  - explanation.prediction_raw)
        worst = max(worst, gap)
        assert gap < 1e-6

    X6, y6 = imbalanced_dataset(np.random.default_rng(910), 120, 360, n_features=6)
    small = learn.train(X6, y6, learn.TrainConfig(n_trees=25, max_depth=3, seed=2))
    brute_worst = 0.0
    for row in range(4):
        explanation = learn.explain(small, X6[row])
        got = np.array([v for _, v in explanation.contributions])
        want = brute_force_shapley(small, X6[row])
        brute_worst = max(brute_worst, float(np.max(np.abs(got - want))))
        assert brute_worst < 1e-6
    _report("C9 explanation soundness",
            f"local accuracy worst gap {worst:.2e} over 1k inputs; "
            f"brute-force Shapley gap {brute_worst:.2e} on 6-feature models")


def test_c10_pipeline_determinism_and_crash_safety(tmp_path):
    demo = tmp_path / "demo"
    shutil.copytree(FIXTURE, demo)
    config = pipeline.load_config(demo / "pipeline.json")
    pipeline.run_pipeline(config)
    exports = demo / "artifacts" / "demo" / "exports"
    first = {p.name: p.read_bytes() for p in exports.iterdir()
             if not p.name.startswith(".tmp-")}
    pipeline.run_pipeline(config)
    second = {p.name: p.read_bytes() for p in exports.iterdir()
              if not p.name.startswith(".tmp-")}
    assert first == second, "reruns must produce byte-identical exports"

    # kill a run mid-flight; no final path may hold a partial file
    crash_dir = tmp_path / "crash"
    shutil.copytree(FIXTURE, crash_dir)
    script = (
        "import sys; sys.path.insert(0, 'src'); "
        "from riskpilot import pipeline; "
        f"cfg = pipeline.load_config(r'{crash_dir / 'pipeline.json'}'); "
        "pipeline.run_pipeline(cfg)"
    )
    kills = 0
    for delay in (0.35, 0.45, 0.55, 0.65, 0.8):
        process = subprocess.Popen([sys.executable, "-c", script],
                                   cwd=Path(__file__).parent.parent,
                                   stdout=subprocess.DEVNULL,
                                   stderr=subprocess.DEVNULL)
        time.sleep(delay)
        if process.poll() is None:
            process.send_signal(signal.SIGKILL)
            process.wait()
            kills += 1
        crash_exports = crash_dir / "artifacts" / "demo" / "exports"
        if not crash_exports.exists():
            continue
        for path in crash_exports.iterdir():
            if path.name.startswith(".tmp-"):
                continue  # orphaned temp from the kill; never a final path
            payload = path.read_bytes()
            assert payload == b"" or payload.endswith(b"\n"), (
                f"truncated final artifact {path.name}")
            if path.suffix == ".json":
                json.loads(payload)  # complete document
            elif path.suffix in (".tsv", ".csv"):
                sep = "\t" if path.suffix == ".tsv" else ","
                rows = [line for line in payload.decode().splitlines()
                        if line and not line.startswith("#")]
                for line in rows[1:]:
                    assert line.count(sep) == rows[0].count(sep), (
                        f"ragged row in {path.name}")
    assert kills > 0, "no run was actually killed mid-flight"
    _report("C10 pipeline determinism + crash safety",
            f"byte-identical reruns; {kills} SIGKILLed runs left no partial finals")


def test_c11_stale_retirement():
    today = date(2025, 9, 30)
    records = [
        {"type": "test_case", "id": "soak", "title": "long green", "area": "quiet",
         "automated": True, "created_on": "2025-01-01"},
        {"type": "test_case", "id": "hot", "title": "found bug", "area": "busy",
         "automated": True, "created_on": "2025-01-01"},
        {"type": "telemetry", "area": "quiet", "avg_distribution": 0.5,
         "avg_stickiness": 0.5, "window_start": "2025-09-01",
         "window_end": "2025-09-28"},
        {"type": "telemetry", "area": "busy", "avg_distribution": 0.5,
         "avg_stickiness": 0.5, "window_start": "2025-09-01",
         "window_end": "2025-09-28"},
        {"type": "bug", "id": "HOT-1", "severity": 4, "opened_on": "2025-09-28",
         "status": "open", "area": "busy"},
    ]
    span = date(2025, 9, 29) - date(2025, 5, 1)
    for i in range(50):  # fifty consecutive passes, no bugs ever
        tested = date(2025, 5, 1) + span * i // 49
        records.append({"type": "test_run", "test_id": "soak", "status": "passed",
                        "tested_on": tested.isoformat(), "duration_hours": 0.5})
    for i in range(8):
        records.append({"type": "test_run", "test_id": "hot", "status": "passed",
                        "tested_on": (date(2025, 9, 1 + i)).isoformat(),
                        "duration_hours": 0.5})
    records.append({"type": "test_run", "test_id": "hot", "status": "failed",
                    "tested_on": "2025-09-29", "duration_hours": 0.5,
                    "found_bug_ids": ["HOT-1"]})

    data = model.Dataset.from_records(
        model.validate_record(r, today=today) for r in records)
    specs = [
        risk.CriterionSpec("failure_rate", risk.PROBABILITY, 1.0,
                           risk.Normalization("ratio"), "script_failure_rate"),
        risk.CriterionSpec("distribution", risk.IMPACT, 1.0,
                           risk.Normalization("ratio"), "avg_distribution"),
        risk.CriterionSpec("decay", risk.TIME, 1.0,
                           risk.Normalization("passthrough"), "bug_free_decay",
                           params={"decay_rate": 0.1, "floor": 0.05}),
    ]
    items, scores = risk.score_catalog(data, specs, today)
    by_id = {s.item_id: s for s in scores}
    # fifty bug-free executions decay to the floor
    assert by_id["soak"].time == 0.05
    # a bug found in the latest run resets decay to full risk
    assert by_id["hot"].time == 1.0

    thresholds = select.StaleThresholds(min_time_factor=0.05,
                                        min_consecutive_passes=30,
                                        max_days_unexecuted=180)
    stats = [select.stale_stats(data.tests[tid], data.runs_for(tid),
                                by_id[tid].time, today, decay_window_days=30)
             for tid in sorted(data.tests)]
    flagged = select.flag_stale(stats, thresholds)
    assert "soak" in flagged and flagged["soak"] == "time_decay"
    assert "hot" not in flagged
    _report("C11 stale retirement",
            f"soak flagged ({flagged['soak']}) at T=0.05; "
            "bug-finding test never flagged")
