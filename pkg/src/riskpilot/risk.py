"""Risk exposure scoring for test items.

An item's exposure is the product of three factors::

    R = P * I * T          with P, I in [0, 10] and T in [0, 1], so R in [0, 100]

``P`` (probability) and ``I`` (impact) are weight-normalized means of their
criteria, ``T`` (time) is the plain mean of its criteria. Criterion values are
normalized into the factor ranges before averaging; weights live in [0, 1]
and are hand-tuned per project rather than learned.

Built-in criteria cover defect counts, change-request counts, defect-to-change
ratio, script failure rate, telemetry distribution/stickiness, manual quality
targets, testing hours in a trailing window, days since last tested, developer
changes in a trailing window, and an exponential bug-free decay that lets risk
drain out of quiet areas (and flags stale tests downstream). Additional
criteria can be sourced from expression trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta, timezone
from typing import Iterable, Mapping, Sequence

from .errors import EngineError
from .expr import ExprRegistry, ExprTree, evaluate
from .model import BugReport, BugStatus, Commit, Dataset, RunStatus, TestCase, TestRun

PROBABILITY = "probability"
IMPACT = "impact"
TIME = "time"
KINDS = (PROBABILITY, IMPACT, TIME)

FACTOR_RANGE = {PROBABILITY: 10.0, IMPACT: 10.0, TIME: 1.0}

BUILTIN_METRICS = (
    "open_unaddressed_defects",
    "addressed_change_requests",
    "defect_to_change_ratio",
    "script_failure_rate",
    "avg_distribution",
    "avg_stickiness",
    "qx_final_target",
    "qx_target_vs_current",
    "testing_hours_in_window",
    "days_since_last_tested",
    "dev_changes_in_window",
    "bug_free_decay",
)

MANUAL_METRICS = ("qx_final_target", "qx_target_vs_current")
WINDOWED_METRICS = ("addressed_change_requests", "testing_hours_in_window",
                    "dev_changes_in_window")


class NonFiniteInput(EngineError):
    code = "risk_non_finite"


class AllWeightsZero(EngineError):
    code = "risk_all_weights_zero"


class EmptyTimeCriteria(EngineError):
    code = "risk_empty_time"


class NoRuns(EngineError):
    code = "risk_no_runs"


class MissingTelemetry(EngineError):
    code = "risk_missing_telemetry"


class BadCriterionSpec(EngineError):
    code = "risk_bad_spec"


@dataclass(frozen=True)
class Normalization:
    """How a raw criterion value maps into its factor range.

    ``affine``: linear map of [src_lo, src_hi] onto the range, clamped.
    ``ratio``: raw is a fraction in [0,1], scaled to the range.
    ``passthrough``: raw is already in range units, clamped.
    """

    kind: str  # affine | ratio | passthrough
    src_lo: float = 0.0
    src_hi: float = 1.0


@dataclass(frozen=True)
class CriterionSpec:
    name: str
    kind: str  # probability | impact | time
    weight: float  # in [0, 1]
    normalization: Normalization
    source: str  # builtin metric id or "tree:<name>"
    window_days: int | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise BadCriterionSpec(f"criterion {self.name!r}: unknown kind {self.kind!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise BadCriterionSpec(
                f"criterion {self.name!r}: weight must be in [0,1], got {self.weight}")
        if self.normalization.kind not in ("affine", "ratio", "passthrough"):
            raise BadCriterionSpec(
                f"criterion {self.name!r}: unknown normalization {self.normalization.kind!r}")
        if (self.normalization.kind == "affine"
                and not self.normalization.src_lo < self.normalization.src_hi):
            raise BadCriterionSpec(
                f"criterion {self.name!r}: affine bounds need src_lo < src_hi")
        if self.window_days is not None and self.window_days <= 0:
            raise BadCriterionSpec(
                f"criterion {self.name!r}: window_days must be positive")
        if self.source in WINDOWED_METRICS and self.window_days is None:
            raise BadCriterionSpec(
                f"criterion {self.name!r}: source {self.source!r} needs window_days")


@dataclass(frozen=True)
class CriterionValue:
    spec: CriterionSpec
    raw: float
    normalized: float


@dataclass(frozen=True)
class RiskItem:
    item_id: str
    criteria: tuple[CriterionValue, ...]
    computed_at: str  # ISO date of the scoring pass


@dataclass(frozen=True)
class BreakdownEntry:
    name: str
    kind: str
    raw: float
    normalized: float
    weight: float
    share: float  # this criterion's contribution to its factor


@dataclass(frozen=True)
class RiskScore:
    item_id: str
    probability: float  # [0, 10]
    impact: float  # [0, 10]
    time: float  # [0, 1]
    exposure: float  # [0, 100]
    breakdown: tuple[BreakdownEntry, ...] = ()


def spec_to_doc(spec: CriterionSpec) -> dict:
    doc: dict = {
        "name": spec.name, "kind": spec.kind, "weight": spec.weight,
        "normalization": {"kind": spec.normalization.kind},
        "source": spec.source,
    }
    if spec.normalization.kind == "affine":
        doc["normalization"]["src_lo"] = spec.normalization.src_lo
        doc["normalization"]["src_hi"] = spec.normalization.src_hi
    if spec.window_days is not None:
        doc["window_days"] = spec.window_days
    if spec.params:
        doc["params"] = dict(spec.params)
    return doc


def spec_from_doc(doc: Mapping) -> CriterionSpec:
    try:
        norm_doc = doc.get("normalization") or {"kind": "passthrough"}
        normalization = Normalization(
            kind=norm_doc.get("kind", "passthrough"),
            src_lo=float(norm_doc.get("src_lo", 0.0)),
            src_hi=float(norm_doc.get("src_hi", 1.0)),
        )
        return CriterionSpec(
            name=str(doc["name"]),
            kind=str(doc["kind"]),
            weight=float(doc["weight"]),
            normalization=normalization,
            source=str(doc["source"]),
            window_days=int(doc["window_days"]) if doc.get("window_days") is not None else None,
            params={str(k): float(v) for k, v in (doc.get("params") or {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BadCriterionSpec(f"malformed criterion spec: {exc}") from None


def normalize(raw: float, spec: CriterionSpec) -> float:
    """Map a raw criterion value into its factor range, clamped."""
    if not math.isfinite(raw):
        raise NonFiniteInput(f"criterion {spec.name!r}: raw value {raw!r} is not finite")
    top = FACTOR_RANGE[spec.kind]
    norm = spec.normalization
    if norm.kind == "affine":
        scaled = (raw - norm.src_lo) / (norm.src_hi - norm.src_lo) * top
    elif norm.kind == "ratio":
        scaled = raw * top
    else:
        scaled = raw
    return min(max(scaled, 0.0), top)


def probability_factor(items: Sequence[tuple[float, float]]) -> float:
    """Weighted mean of (value, weight) pairs; the probability factor."""
    return _weighted_mean(items, "probability")


def impact_factor(items: Sequence[tuple[float, float]]) -> float:
    """Weighted mean of (value, weight) pairs; the impact factor."""
    return _weighted_mean(items, "impact")


def _weighted_mean(items: Sequence[tuple[float, float]], label: str) -> float:
    if not items:
        raise AllWeightsZero(f"no {label} criteria supplied")
    total_weight = 0.0
    total = 0.0
    for value, weight in items:
        total += value * weight
        total_weight += weight
    if total_weight <= 0.0:
        raise AllWeightsZero(f"all {label} weights are zero")
    return total / total_weight


def time_factor(values: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Mean of time-criterion values.

    Unweighted by default. Passing ``weights`` switches to a weighted mean for
    configurations that want time criteria tuned like the other two factors.
    """
    if not values:
        raise EmptyTimeCriteria("no time criteria supplied")
    if weights is None:
        return sum(values) / len(values)
    return _weighted_mean(list(zip(values, weights)), "time")


def risk_exposure(probability: float, impact: float, time: float,
                  item_id: str = "", breakdown: Iterable[BreakdownEntry] = ()) -> RiskScore:
    """Combine the three factors into an exposure score in [0, 100]."""
    return RiskScore(
        item_id=item_id,
        probability=probability,
        impact=impact,
        time=time,
        exposure=probability * impact * time,
        breakdown=tuple(breakdown),
    )


def failure_rate(runs: Sequence[TestRun]) -> float:
    """Share of non-passing executions. Blocked runs count as failures."""
    if not runs:
        raise NoRuns("failure rate needs at least one run")
    bad = sum(1 for r in runs if r.status in (RunStatus.FAILED, RunStatus.BLOCKED))
    return bad / len(runs)


def decay_time_criterion(bug_free_streak: int, decay_rate: float = 0.1,
                         floor: float = 0.05) -> float:
    """Exponential decay of a time criterion over bug-free executions.

    ``bug_free_streak`` counts consecutive executions since the last one that
    found a bug; zero (a bug in the most recent run, or no history yet) keeps
    the criterion at 1.0. The value never drops below ``floor``.
    """
    if decay_rate <= 0:
        raise BadCriterionSpec("decay_rate must be positive")
    if not 0.0 <= floor < 1.0:
        raise BadCriterionSpec("floor must be in [0, 1)")
    if bug_free_streak < 0:
        raise BadCriterionSpec("bug_free_streak cannot be negative")
    return max(floor, math.exp(-decay_rate * bug_free_streak))


def bug_free_streak(runs: Sequence[TestRun]) -> int:
    """Consecutive most-recent executions with no bug found.

    Runs are taken in tested_on order; a run that reported at least one bug
    resets the streak. No runs at all means no evidence of decay: streak 0.
    """
    ordered = sorted(runs, key=lambda r: (r.tested_on, r.test_id))
    streak = 0
    for run in reversed(ordered):
        if run.found_bug_ids:
            break
        streak += 1
    return streak


def area_matches_path(area: str, path: str) -> bool:
    """A commit file touches an area when a path segment equals the area name.

    Comparison is case-insensitive with non-alphanumerics squashed, so area
    "Franchise Mode" matches ``game/franchise_mode/sim.cpp``.
    """
    want = _squash(area)
    return any(_squash(segment) == want for segment in path.split("/"))


def _squash(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


def commit_touches_area(commit: Commit, area: str) -> bool:
    return any(area_matches_path(area, change.path) for change in commit.changes)


def _bug_addressed_on(bug: BugReport, data: Dataset) -> date | None:
    """The day a bug counts as addressed: its fix commit's day, else opened_on."""
    if bug.status is BugStatus.OPEN:
        return None
    if bug.fixed_by_commit:
        for commit in data.commits:
            if commit.id == bug.fixed_by_commit:
                return commit.timestamp.astimezone(timezone.utc).date()
    return bug.opened_on


def _window_start(today: date, window_days: int) -> date:
    return today - timedelta(days=window_days)


def builtin_raw_value(metric: str, test: TestCase, data: Dataset,
                      spec: CriterionSpec, today: date,
                      manual: Mapping[str, float]) -> float:
    """Raw (pre-normalization) value of one built-in metric for one test."""
    area = test.area
    runs = data.runs_for(test.id)

    if metric == "open_unaddressed_defects":
        return float(sum(1 for b in data.bugs_in_area(area) if b.status is BugStatus.OPEN))

    if metric == "addressed_change_requests":
        start = _window_start(today, spec.window_days or 0)
        count = 0
        for bug in data.bugs_in_area(area):
            addressed = _bug_addressed_on(bug, data)
            if addressed is not None and start <= addressed <= today:
                count += 1
        return float(count)

    if metric == "defect_to_change_ratio":
        start = _window_start(today, spec.window_days) if spec.window_days else None
        bugs = [b for b in data.bugs_in_area(area)
                if start is None or start <= b.opened_on <= today]
        changes = [c for c in data.commits if commit_touches_area(c, area)
                   and (start is None or start <= c.timestamp.date() <= today)]
        if not changes:
            return 0.0
        return len(bugs) / len(changes)

    if metric == "script_failure_rate":
        if not runs:
            return 0.0
        return failure_rate(runs)

    if metric in ("avg_distribution", "avg_stickiness"):
        covering = [t for t in data.telemetry if t.area == area]
        if not covering:
            raise MissingTelemetry(f"no telemetry record covers area {area!r}", area=area)
        latest = max(covering, key=lambda t: t.window_end)
        return latest.avg_distribution if metric == "avg_distribution" else latest.avg_stickiness

    if metric in MANUAL_METRICS:
        return float(manual.get(spec.name, manual.get(metric, 0.0)))

    if metric == "testing_hours_in_window":
        start = _window_start(today, spec.window_days or 0)
        return float(sum(r.duration_hours for r in runs if start <= r.tested_on <= today))

    if metric == "days_since_last_tested":
        if runs:
            last = max(r.tested_on for r in runs)
        else:
            last = test.created_on  # never executed: age since creation
        return float(max((today - last).days, 0))

    if metric == "dev_changes_in_window":
        start = _window_start(today, spec.window_days or 0)
        return float(sum(1 for c in data.commits
                         if start <= c.timestamp.date() <= today
                         and commit_touches_area(c, area)))

    if metric == "bug_free_decay":
        area_test_ids = {t.id for t in data.tests.values() if t.area == area}
        area_runs = [r for r in data.runs if r.test_id in area_test_ids]
        streak = bug_free_streak(area_runs)
        return decay_time_criterion(
            streak,
            decay_rate=float(spec.params.get("decay_rate", 0.1)),
            floor=float(spec.params.get("floor", 0.05)),
        )

    raise BadCriterionSpec(f"unknown builtin metric {metric!r}")


def compute_criteria(test: TestCase, data: Dataset, specs: Sequence[CriterionSpec],
                     today: date, registry: ExprRegistry | None = None,
                     manual: Mapping[str, float] | None = None) -> RiskItem:
    """Compute and normalize every criterion for one test item.

    Expression-tree sources (``tree:<name>``) are evaluated with the other
    criteria's raw values plus ``severity_max`` available as bindings, so
    derived criteria can combine the built-ins.
    """
    if not specs:
        raise BadCriterionSpec("at least one criterion spec is required")
    manual = manual or {}

    raw_values: dict[str, float] = {}
    tree_specs: list[CriterionSpec] = []
    for spec in specs:
        if spec.source.startswith("tree:"):
            tree_specs.append(spec)
            continue
        raw_values[spec.name] = builtin_raw_value(spec.source, test, data, spec, today, manual)

    for spec in tree_specs:
        if registry is None:
            raise BadCriterionSpec(
                f"criterion {spec.name!r} needs expression registry for {spec.source!r}")
        tree = registry.get(spec.source[len("tree:"):])
        bindings = dict(raw_values)
        bindings.setdefault("severity_max", _max_severity(test, data))
        raw_values[spec.name] = evaluate(tree, bindings, registry)

    criteria = []
    for spec in specs:
        raw = raw_values[spec.name]
        criteria.append(CriterionValue(spec=spec, raw=raw, normalized=normalize(raw, spec)))
    return RiskItem(item_id=test.id, criteria=tuple(criteria),
                    computed_at=today.isoformat())


def _max_severity(test: TestCase, data: Dataset) -> float:
    severities = [b.severity for b in data.bugs_in_area(test.area)]
    return float(max(severities)) if severities else 0.0


def score_item(item: RiskItem, weighted_time: bool = False) -> RiskScore:
    """Fold an item's normalized criteria into its exposure score."""
    prob: list[tuple[float, float]] = []
    impact: list[tuple[float, float]] = []
    times: list[float] = []
    time_weights: list[float] = []
    for criterion in item.criteria:
        if criterion.spec.kind == PROBABILITY:
            prob.append((criterion.normalized, criterion.spec.weight))
        elif criterion.spec.kind == IMPACT:
            impact.append((criterion.normalized, criterion.spec.weight))
        else:
            times.append(criterion.normalized)
            time_weights.append(criterion.spec.weight)

    p = probability_factor(prob)
    i = impact_factor(impact)
    t = time_factor(times, time_weights if weighted_time else None)

    breakdown = []
    prob_weight = sum(w for _, w in prob)
    impact_weight = sum(w for _, w in impact)
    time_total = sum(time_weights) if weighted_time else float(len(times))
    for criterion in item.criteria:
        kind = criterion.spec.kind
        if kind == PROBABILITY:
            share = criterion.normalized * criterion.spec.weight / prob_weight
        elif kind == IMPACT:
            share = criterion.normalized * criterion.spec.weight / impact_weight
        elif weighted_time:
            share = (criterion.normalized * criterion.spec.weight / time_total
                     if time_total > 0 else 0.0)
        else:
            share = criterion.normalized / time_total
        breakdown.append(BreakdownEntry(
            name=criterion.spec.name, kind=kind, raw=criterion.raw,
            normalized=criterion.normalized, weight=criterion.spec.weight, share=share))

    return risk_exposure(p, i, t, item_id=item.item_id, breakdown=breakdown)


def score_catalog(data: Dataset, specs: Sequence[CriterionSpec], today: date,
                  registry: ExprRegistry | None = None,
                  manual: Mapping[str, Mapping[str, float]] | None = None,
                  weighted_time: bool = False) -> tuple[list[RiskItem], list[RiskScore]]:
    """Score every test in the catalog. Deterministic: items ordered by id."""
    manual = manual or {}
    items = []
    scores = []
    for test_id in sorted(data.tests):
        test = data.tests[test_id]
        item = compute_criteria(test, data, specs, today, registry,
                                manual.get(test_id))
        items.append(item)
        scores.append(score_item(item, weighted_time=weighted_time))
    return items, scores


def rescore_with_weights(items: Sequence[RiskItem],
                         overrides: Mapping[str, float],
                         weighted_time: bool = False) -> list[RiskScore]:
    """Re-fold cached criteria under new weights without recomputing raws.

    This is the what-if path: raw metric values do not depend on weights, so
    only the weighted means need to be redone.
    """
    known = {c.spec.name for item in items for c in item.criteria}
    unknown = set(overrides) - known
    if unknown:
        raise BadCriterionSpec(f"weight overrides name unknown criteria: {sorted(unknown)}")
    for name, weight in overrides.items():
        if not 0.0 <= float(weight) <= 1.0:
            raise BadCriterionSpec(f"override for {name!r} must be in [0,1], got {weight}")

    rescored = []
    for item in items:
        patched = tuple(
            CriterionValue(
                spec=CriterionSpec(
                    name=c.spec.name, kind=c.spec.kind,
                    weight=float(overrides.get(c.spec.name, c.spec.weight)),
                    normalization=c.spec.normalization, source=c.spec.source,
                    window_days=c.spec.window_days, params=c.spec.params),
                raw=c.raw, normalized=c.normalized)
            for c in item.criteria)
        rescored.append(score_item(
            RiskItem(item.item_id, patched, item.computed_at),
            weighted_time=weighted_time))
    return rescored


def default_criteria() -> list[CriterionSpec]:
    """A reasonable starting catalog covering all built-in metrics."""
    affine = Normalization
    return [
        CriterionSpec("open_defects", PROBABILITY, 0.8,
                      affine("affine", 0.0, 20.0), "open_unaddressed_defects"),
        CriterionSpec("addressed_change_requests", PROBABILITY, 0.4,
                      affine("affine", 0.0, 20.0), "addressed_change_requests",
                      window_days=30),
        CriterionSpec("defect_to_change_ratio", PROBABILITY, 0.5,
                      affine("affine", 0.0, 2.0), "defect_to_change_ratio"),
        CriterionSpec("script_failure_rate", PROBABILITY, 1.0,
                      Normalization("ratio"), "script_failure_rate"),
        CriterionSpec("dev_changes", PROBABILITY, 0.6,
                      affine("affine", 0.0, 50.0), "dev_changes_in_window",
                      window_days=30),
        CriterionSpec("avg_distribution", IMPACT, 1.0,
                      Normalization("ratio"), "avg_distribution"),
        CriterionSpec("avg_stickiness", IMPACT, 0.8,
                      Normalization("ratio"), "avg_stickiness"),
        CriterionSpec("qx_final_target", IMPACT, 0.5,
                      Normalization("passthrough"), "qx_final_target"),
        CriterionSpec("qx_target_vs_current", TIME, 0.5,
                      affine("affine", 0.0, 10.0), "qx_target_vs_current"),
        CriterionSpec("testing_hours", TIME, 0.5,
                      affine("affine", 0.0, 40.0), "testing_hours_in_window",
                      window_days=30),
        CriterionSpec("days_since_last_tested", TIME, 0.7,
                      affine("affine", 0.0, 90.0), "days_since_last_tested"),
        CriterionSpec("bug_free_decay", TIME, 1.0,
                      Normalization("passthrough"), "bug_free_decay",
                      params={"decay_rate": 0.1, "floor": 0.05}),
    ]
