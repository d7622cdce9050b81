"""Turn risk scores into an executable test plan.

Ranking is fully deterministic: descending exposure, ties broken by older
last-tested date first, then test id. Budgets come in two flavors, a straight
top-k count and an hour budget filled greedily by expected duration. Stale
tests are excluded from selection but kept in the plan with the reason, so a
human can confirm the retirement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

from .errors import EngineError
from .model import RunStatus, TestCase, TestRun
from .risk import RiskScore

DATE_MIN = date.min


class EmptyRanking(EngineError):
    code = "select_empty_ranking"


class BadBudget(EngineError):
    code = "select_bad_budget"


@dataclass(frozen=True)
class Budget:
    kind: str  # count | hours
    value: float

    def __post_init__(self) -> None:
        if self.kind not in ("count", "hours"):
            raise BadBudget(f"unknown budget kind {self.kind!r}")
        if self.value <= 0:
            raise BadBudget("budget must be positive")


@dataclass(frozen=True)
class StaleThresholds:
    min_time_factor: float = 0.05
    min_consecutive_passes: int = 30
    max_days_unexecuted: int = 180

    def __post_init__(self) -> None:
        if self.min_time_factor <= 0 or self.min_consecutive_passes <= 0 \
                or self.max_days_unexecuted <= 0:
            raise BadBudget("stale thresholds must be positive")


@dataclass(frozen=True)
class StaleStats:
    """Per-test facts the stale rules look at."""

    test_id: str
    time_factor: float
    consecutive_passes: int
    days_unexecuted: int
    found_bug_recently: bool  # a run in the decay window reported a bug


@dataclass(frozen=True)
class PlanEntry:
    rank: int
    test_id: str
    exposure: float
    probability: float
    impact: float
    time: float
    selected: bool
    stale_reason: str | None = None
    expected_duration: float | None = None


@dataclass(frozen=True)
class SelectionPlan:
    entries: tuple[PlanEntry, ...]
    budget: Budget
    selected_count: int
    stale: Mapping[str, str] = field(default_factory=dict)

    def selected_ids(self) -> list[str]:
        return [e.test_id for e in self.entries if e.selected]


def rank(scores: Sequence[RiskScore],
         last_tested: Mapping[str, date] | None = None) -> list[RiskScore]:
    """Order scores for execution. Never-tested items sort as oldest."""
    if not scores:
        raise EmptyRanking("cannot rank an empty score list")
    last_tested = last_tested or {}

    def key(score: RiskScore):
        return (-score.exposure,
                last_tested.get(score.item_id, DATE_MIN),
                score.item_id)

    return sorted(scores, key=key)


def expected_duration(runs: Sequence[TestRun], default: float) -> float:
    """Mean historical duration, falling back to the configured default."""
    durations = [r.duration_hours for r in runs]
    if not durations:
        return default
    return sum(durations) / len(durations)


def select_budget(ranked: Sequence[RiskScore], budget: Budget,
                  durations: Mapping[str, float] | None = None,
                  stale: Mapping[str, str] | None = None,
                  default_duration: float = 1.0) -> SelectionPlan:
    """Build the plan: spend the budget down the ranking, skipping stale tests.

    Count mode takes the top-k non-stale entries. Hours mode takes the longest
    non-stale prefix of the ranking whose summed expected durations stay within
    the budget; selection stops at the first test that no longer fits, so the
    budget is never exceeded.
    """
    if not ranked:
        raise EmptyRanking("cannot select from an empty ranking")
    durations = durations or {}
    stale = dict(stale or {})

    entries: list[PlanEntry] = []
    taken = 0
    hours_left = budget.value if budget.kind == "hours" else 0.0
    prefix_open = True
    for position, score in enumerate(ranked, start=1):
        reason = stale.get(score.item_id)
        selected = False
        duration = durations.get(score.item_id)
        if reason is None:
            if budget.kind == "count":
                if taken < int(budget.value):
                    selected = True
                    taken += 1
            elif prefix_open:
                cost = duration if duration is not None else default_duration
                if cost <= hours_left:
                    selected = True
                    hours_left -= cost
                    taken += 1
                else:
                    prefix_open = False
        entries.append(PlanEntry(
            rank=position, test_id=score.item_id, exposure=score.exposure,
            probability=score.probability, impact=score.impact, time=score.time,
            selected=selected, stale_reason=reason, expected_duration=duration))

    return SelectionPlan(entries=tuple(entries), budget=budget,
                         selected_count=taken, stale=stale)


def stale_stats(test: TestCase, runs: Sequence[TestRun], time_factor: float,
                today: date, decay_window_days: int) -> StaleStats:
    """Gather the facts the stale rules need for one test."""
    ordered = sorted(runs, key=lambda r: (r.tested_on, r.test_id))
    passes = 0
    for run in reversed(ordered):
        if run.status is not RunStatus.PASSED:
            break
        passes += 1
    if ordered:
        last = ordered[-1].tested_on
        days_unexecuted = max((today - last).days, 0)
    else:
        days_unexecuted = max((today - test.created_on).days, 0)
    window_start = today.toordinal() - decay_window_days
    found_recent_bug = any(
        r.found_bug_ids and r.tested_on.toordinal() >= window_start
        for r in ordered)
    return StaleStats(test_id=test.id, time_factor=time_factor,
                      consecutive_passes=passes, days_unexecuted=days_unexecuted,
                      found_bug_recently=found_recent_bug)


def flag_stale(stats: Sequence[StaleStats],
               thresholds: StaleThresholds) -> dict[str, str]:
    """Map of test id to stale reason. Tests with a recent bug are never flagged."""
    flagged: dict[str, str] = {}
    for stat in stats:
        if stat.found_bug_recently:
            continue
        if stat.time_factor <= thresholds.min_time_factor:
            flagged[stat.test_id] = "time_decay"
        elif stat.consecutive_passes >= thresholds.min_consecutive_passes:
            flagged[stat.test_id] = "consecutive_passes"
        elif stat.days_unexecuted >= thresholds.max_days_unexecuted:
            flagged[stat.test_id] = "unexecuted"
    return flagged


def plan_to_rows(plan: SelectionPlan) -> list[dict]:
    """Tabular form of a plan, one row per entry in rank order."""
    rows = []
    for entry in plan.entries:
        rows.append({
            "rank": entry.rank,
            "test_id": entry.test_id,
            "exposure": entry.exposure,
            "probability": entry.probability,
            "impact": entry.impact,
            "time": entry.time,
            "selected": entry.selected,
            "stale_reason": entry.stale_reason or "",
        })
    return rows


def plan_document(plan: SelectionPlan, scores: Mapping[str, "RiskScore"],
                  computed_on: str) -> dict:
    """The structured plan document served to the UI and written to exports.

    The service's what-if path rebuilds plans through this same function, so
    an override-free what-if response is byte-identical to the stored plan.
    """
    entries = []
    for row in plan_to_rows(plan):
        score = scores[row["test_id"]]
        entries.append({
            **row,
            "breakdown": [
                {"name": b.name, "kind": b.kind, "raw": b.raw,
                 "normalized": b.normalized, "weight": b.weight, "share": b.share}
                for b in score.breakdown
            ],
        })
    return {
        "budget": {"kind": plan.budget.kind, "value": plan.budget.value},
        "computed_on": computed_on,
        "entries": entries,
    }
