"""Risk factors, normalization, decay and criterion computation."""

import math
from datetime import date

import numpy as np
import pytest

from riskpilot import model, risk

from _oracles import plain_mean_oracle, weighted_mean_oracle


TODAY = date(2025, 9, 30)


def spec_of(kind, normalization="passthrough", weight=1.0, source="qx_final_target",
            name="crit", **kwargs):
    return risk.CriterionSpec(name, kind, weight,
                              risk.Normalization(normalization, *kwargs.pop("bounds", ())),
                              source, **kwargs)


# -- normalize ---------------------------------------------------------------

def test_affine_midpoint():
    spec = spec_of(risk.PROBABILITY, "affine", bounds=(0.0, 100.0))
    assert risk.normalize(50.0, spec) == 5.0


def test_affine_clamps_below():
    spec = spec_of(risk.PROBABILITY, "affine", bounds=(10.0, 20.0))
    assert risk.normalize(3.0, spec) == 0.0
    assert risk.normalize(250.0, spec) == 10.0


def test_ratio_failure_rate_scaling():
    spec = spec_of(risk.PROBABILITY, "ratio")
    assert risk.normalize(0.7, spec) == pytest.approx(7.0)


def test_time_kind_normalizes_into_unit_interval():
    spec = spec_of(risk.TIME, "affine", bounds=(0.0, 10.0))
    assert risk.normalize(5.0, spec) == 0.5
    assert risk.normalize(99.0, spec) == 1.0


def test_non_finite_raw_rejected():
    with pytest.raises(risk.NonFiniteInput):
        risk.normalize(float("nan"), spec_of(risk.PROBABILITY))


# -- factors -------------------------------------------------------------------

def test_single_probability_criterion():
    assert risk.probability_factor([(10.0, 1.0)]) == 10.0


def test_probability_hand_arithmetic():
    assert risk.probability_factor([(4.0, 0.5), (8.0, 0.5)]) == pytest.approx(6.0)


def test_probability_weight_scaling_invariance():
    items = [(4.0, 0.5), (8.0, 0.25), (1.0, 0.125)]
    base = risk.probability_factor(items)
    for c in (0.5, 2.0, 7.3):
        scaled = [(p, w * c) for p, w in items]
        assert risk.probability_factor(scaled) == pytest.approx(base, abs=1e-12)


def test_impact_zero_and_hand_value():
    assert risk.impact_factor([(0.0, 1.0)]) == 0.0
    assert risk.impact_factor([(10.0, 0.25), (0.0, 0.75)]) == pytest.approx(2.5)


def test_impact_permutation_invariant():
    items = [(3.0, 0.2), (7.0, 0.5), (9.0, 0.3)]
    assert risk.impact_factor(items) == pytest.approx(
        risk.impact_factor(list(reversed(items))))


def test_all_weights_zero():
    with pytest.raises(risk.AllWeightsZero):
        risk.probability_factor([(5.0, 0.0), (2.0, 0.0)])


def test_time_factor_values():
    assert risk.time_factor([1.0, 1.0, 1.0]) == 1.0
    assert risk.time_factor([1.0, 0.5]) == pytest.approx(0.75)
    assert risk.time_factor([0.0]) == 0.0


def test_time_factor_weighted_mode():
    assert risk.time_factor([1.0, 0.5], weights=[0.9, 0.1]) == pytest.approx(0.95)


def test_empty_time_criteria():
    with pytest.raises(risk.EmptyTimeCriteria):
        risk.time_factor([])


def test_risk_exposure_product():
    assert risk.risk_exposure(10.0, 10.0, 1.0).exposure == 100.0
    assert risk.risk_exposure(0.0, 9.0, 1.0).exposure == 0.0
    assert risk.risk_exposure(6.0, 2.5, 0.75).exposure == pytest.approx(11.25)


def test_factor_oracle_agreement_randomized():
    rng = np.random.default_rng(4242)
    for _ in range(2000):
        m = int(rng.integers(1, 7))
        values = rng.uniform(0.0, 10.0, size=m)
        weights = rng.uniform(0.01, 1.0, size=m)
        got = risk.probability_factor(list(zip(values, weights)))
        assert abs(got - weighted_mean_oracle(values, weights)) < 1e-9
        assert 0.0 <= got <= 10.0
        t_values = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 6)))
        t = risk.time_factor(list(t_values))
        assert abs(t - plain_mean_oracle(t_values)) < 1e-9
        assert 0.0 <= t <= 1.0


def test_monotonicity_in_each_criterion():
    rng = np.random.default_rng(7)
    for _ in range(200):
        values = list(rng.uniform(0, 10, size=3))
        weights = list(rng.uniform(0.05, 1.0, size=3))
        base = risk.probability_factor(list(zip(values, weights)))
        bumped = values.copy()
        bumped[1] = min(bumped[1] + rng.uniform(0.1, 2.0), 10.0)
        assert risk.probability_factor(list(zip(bumped, weights))) >= base - 1e-12


# -- failure rate and decay -----------------------------------------------------

def _runs(statuses):
    return [model.TestRun("T1", model.RunStatus(s), date(2025, 9, d + 1), 1.0)
            for d, s in enumerate(statuses)]


def test_failure_rate_worked_example():
    runs = _runs(["passed"] * 3 + ["failed"] * 4 + ["blocked"] * 3)
    assert risk.failure_rate(runs) == 0.70


def test_failure_rate_edges():
    assert risk.failure_rate(_runs(["passed", "passed"])) == 0.0
    assert risk.failure_rate(_runs(["failed"])) == 1.0
    with pytest.raises(risk.NoRuns):
        risk.failure_rate([])


def test_decay_fresh_bug_keeps_full_risk():
    assert risk.decay_time_criterion(0) == 1.0


def test_decay_closed_form():
    assert risk.decay_time_criterion(10, decay_rate=0.1, floor=0.05) == pytest.approx(
        math.exp(-1.0))


def test_decay_hits_floor():
    assert risk.decay_time_criterion(10_000, decay_rate=0.1, floor=0.05) == 0.05


def test_decay_monotone_in_streak():
    previous = 1.0
    for streak in range(0, 200, 5):
        value = risk.decay_time_criterion(streak, decay_rate=0.07, floor=0.03)
        assert value <= previous + 1e-15
        previous = value


def test_bug_free_streak_resets_on_bug():
    runs = _runs(["passed"] * 4)
    runs[1] = model.TestRun("T1", model.RunStatus.PASSED, date(2025, 9, 2), 1.0,
                            found_bug_ids=("B1",))
    assert risk.bug_free_streak(runs) == 2
    runs[-1] = model.TestRun("T1", model.RunStatus.PASSED, date(2025, 9, 4), 1.0,
                             found_bug_ids=("B2",))
    assert risk.bug_free_streak(runs) == 0


# -- compute_criteria over a hand-built fixture ----------------------------------

def _fixture_dataset():
    records = [
        {"type": "test_case", "id": "T1", "title": "sim smoke", "area": "physics",
         "automated": True, "created_on": "2025-06-01"},
        {"type": "test_case", "id": "T2", "title": "never run", "area": "physics",
         "automated": False, "created_on": "2025-09-10"},
        # 3 runs inside a 30 day window summing 6 testing hours
        {"type": "test_run", "test_id": "T1", "status": "passed",
         "tested_on": "2025-09-05", "duration_hours": 1.5},
        {"type": "test_run", "test_id": "T1", "status": "failed",
         "tested_on": "2025-09-12", "duration_hours": 2.5},
        {"type": "test_run", "test_id": "T1", "status": "passed",
         "tested_on": "2025-09-20", "duration_hours": 2.0},
        # outside the window
        {"type": "test_run", "test_id": "T1", "status": "passed",
         "tested_on": "2025-07-01", "duration_hours": 4.0},
        {"type": "bug", "id": "PHY-1", "severity": 4, "opened_on": "2025-09-01",
         "status": "open", "area": "physics"},
        {"type": "bug", "id": "PHY-2", "severity": 2, "opened_on": "2025-08-20",
         "status": "addressed", "area": "physics", "fixed_by_commit": "C1"},
        {"type": "commit", "id": "C1", "author": "ann",
         "timestamp": "2025-09-15T10:00:00Z", "message": "Fix PHY-2",
         "changes": [{"path": "game/physics/solver.c", "action": "edit",
                      "storage_type": "text", "lines_added": 0, "lines_deleted": 0,
                      "lines_edited": 1, "hunks": [[1, 1, 1]], "file_size": 10,
                      "is_code": True}]},
        {"type": "telemetry", "area": "physics", "avg_distribution": 0.42,
         "avg_stickiness": 0.66, "window_start": "2025-09-01",
         "window_end": "2025-09-28"},
    ]
    return model.Dataset.from_records(
        model.validate_record(r, today=TODAY) for r in records)


def _specs():
    return [
        spec_of(risk.PROBABILITY, "affine", 0.8, "open_unaddressed_defects",
                name="open_defects", bounds=(0.0, 10.0)),
        spec_of(risk.PROBABILITY, "ratio", 1.0, "script_failure_rate",
                name="failure_rate"),
        spec_of(risk.PROBABILITY, "affine", 0.5, "defect_to_change_ratio",
                name="defect_ratio", bounds=(0.0, 4.0)),
        spec_of(risk.PROBABILITY, "affine", 0.5, "dev_changes_in_window",
                name="dev_changes", bounds=(0.0, 20.0), window_days=30),
        spec_of(risk.IMPACT, "ratio", 1.0, "avg_distribution", name="distribution"),
        spec_of(risk.IMPACT, "ratio", 0.5, "avg_stickiness", name="stickiness"),
        spec_of(risk.TIME, "affine", 1.0, "testing_hours_in_window",
                name="testing_hours", bounds=(0.0, 40.0), window_days=30),
        spec_of(risk.TIME, "affine", 1.0, "days_since_last_tested",
                name="days_since", bounds=(0.0, 90.0)),
    ]


def test_compute_criteria_fixture_values():
    data = _fixture_dataset()
    item = risk.compute_criteria(data.tests["T1"], data, _specs(), TODAY)
    raw = {c.spec.name: c.raw for c in item.criteria}
    assert raw["open_defects"] == 1.0  # PHY-1 open
    assert raw["failure_rate"] == pytest.approx(0.25)  # 1 failed of 4
    assert raw["testing_hours"] == pytest.approx(6.0)  # 1.5 + 2.5 + 2.0
    assert raw["days_since"] == 10.0  # last tested 2025-09-20
    assert raw["dev_changes"] == 1.0  # C1 touches game/physics/...
    assert raw["defect_ratio"] == pytest.approx(2.0)  # 2 bugs / 1 change


def test_never_executed_falls_back_to_created_on():
    data = _fixture_dataset()
    item = risk.compute_criteria(data.tests["T2"], data, _specs(), TODAY)
    raw = {c.spec.name: c.raw for c in item.criteria}
    assert raw["days_since"] == 20.0  # created 2025-09-10
    assert raw["failure_rate"] == 0.0  # no runs: no evidence of failure


def test_defect_ratio_zero_without_changes():
    data = _fixture_dataset()
    spec = spec_of(risk.PROBABILITY, "passthrough", 1.0, "defect_to_change_ratio",
                   name="ratio", window_days=3)  # window excludes C1
    item = risk.compute_criteria(data.tests["T1"], data, [spec] + _specs(), TODAY)
    assert item.criteria[0].raw == 0.0


def test_missing_telemetry_is_an_error():
    records = [
        {"type": "test_case", "id": "T1", "title": "x", "area": "uncovered",
         "automated": True, "created_on": "2025-06-01"},
    ]
    data = model.Dataset.from_records(
        model.validate_record(r, today=TODAY) for r in records)
    spec = spec_of(risk.IMPACT, "ratio", 1.0, "avg_distribution", name="dist")
    with pytest.raises(risk.MissingTelemetry):
        risk.compute_criteria(data.tests["T1"], data, [spec], TODAY)


def test_tree_sourced_criterion():
    from riskpilot import expr

    data = _fixture_dataset()
    doc = {"name": "pressure", "inputs": ["open_defects", "severity_max"],
           "root": {"kind": "binary", "op": "*",
                    "left": {"kind": "input", "name": "open_defects"},
                    "right": {"kind": "binary", "op": "+",
                              "left": {"kind": "const", "value": 1},
                              "right": {"kind": "input", "name": "severity_max"}}}}
    registry = expr.ExprRegistry()
    registry.add(expr.parse_tree(doc))
    specs = _specs() + [
        spec_of(risk.PROBABILITY, "affine", 0.5, "tree:pressure",
                name="pressure", bounds=(0.0, 50.0))]
    item = risk.compute_criteria(data.tests["T1"], data, specs, TODAY,
                                 registry=registry)
    raw = {c.spec.name: c.raw for c in item.criteria}
    assert raw["pressure"] == pytest.approx(1.0 * (1 + 4))  # severity_max = 4


def test_score_item_breakdown_shares_sum_to_factors():
    data = _fixture_dataset()
    item = risk.compute_criteria(data.tests["T1"], data, _specs(), TODAY)
    score = risk.score_item(item)
    assert score.exposure == pytest.approx(
        score.probability * score.impact * score.time, abs=1e-9)
    p_share = sum(b.share for b in score.breakdown if b.kind == risk.PROBABILITY)
    i_share = sum(b.share for b in score.breakdown if b.kind == risk.IMPACT)
    t_share = sum(b.share for b in score.breakdown if b.kind == risk.TIME)
    assert p_share == pytest.approx(score.probability)
    assert i_share == pytest.approx(score.impact)
    assert t_share == pytest.approx(score.time)


def test_rescore_with_weights_matches_full_scoring():
    data = _fixture_dataset()
    specs = _specs()
    item = risk.compute_criteria(data.tests["T1"], data, specs, TODAY)
    overrides = {"failure_rate": 0.2, "stickiness": 0.9}
    rescored = risk.rescore_with_weights([item], overrides)[0]

    patched_specs = []
    for spec in specs:
        weight = overrides.get(spec.name, spec.weight)
        patched_specs.append(risk.CriterionSpec(
            spec.name, spec.kind, weight, spec.normalization, spec.source,
            spec.window_days, spec.params))
    direct = risk.score_item(
        risk.compute_criteria(data.tests["T1"], data, patched_specs, TODAY))
    assert rescored.exposure == pytest.approx(direct.exposure, abs=1e-12)


def test_rescore_rejects_unknown_criterion():
    data = _fixture_dataset()
    item = risk.compute_criteria(data.tests["T1"], data, _specs(), TODAY)
    with pytest.raises(risk.BadCriterionSpec):
        risk.rescore_with_weights([item], {"no_such": 0.5})


def test_default_criteria_are_valid_and_cover_builtins():
    specs = risk.default_criteria()
    names = {s.source for s in specs}
    assert set(risk.BUILTIN_METRICS) == names
