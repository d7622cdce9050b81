"""Canonical domain records and validation for everything the engine ingests.

The ingestion format is newline-delimited JSON: one document per line, each
carrying a ``"type"`` tag in ``{test_case, test_run, bug, commit, telemetry}``.
Field names are documented in ``docs/formats.md`` and are stable.

All types are immutable after validation and safe to share between
concurrent tasks. Dates are canonicalized to UTC on the way in; "days since"
style computations use whole-day floor.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field, fields
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping

from .errors import EngineError

# Uppercase project key, hyphen, digits. Trackers vary, so the pattern is an
# argument everywhere it is used; this is only the default.
DEFAULT_ISSUE_KEY_PATTERN = r"\b[A-Z][A-Z0-9]*-[0-9]+\b"


class UnknownTag(EngineError):
    code = "unknown_tag"


class InvariantViolation(EngineError):
    code = "invariant_violation"

    def __init__(self, field_name: str, message: str):
        super().__init__(message, field=field_name)
        self.field = field_name


class MalformedDate(EngineError):
    code = "malformed_date"


class RunStatus(str, Enum):
    PASSED = "passed"
    FAILED = "failed"
    BLOCKED = "blocked"


class BugStatus(str, Enum):
    OPEN = "open"
    ADDRESSED = "addressed"
    CLOSED = "closed"


class ChangeAction(str, Enum):
    ADD = "add"
    EDIT = "edit"
    DELETE = "delete"
    MOVE_ADD = "move_add"
    MOVE_DELETE = "move_delete"
    BRANCH = "branch"
    INTEGRATE = "integrate"


class StorageType(str, Enum):
    TEXT = "text"
    UTF = "utf"
    BINARY = "binary"


@dataclass(frozen=True)
class Hunk:
    """One contiguous diff region, in pre-image coordinates.

    ``start_line`` is the 1-based first pre-image line the hunk touches,
    ``old_lines`` the number of pre-image lines consumed, ``new_lines`` the
    number of post-image lines produced. ``added_text`` optionally carries the
    produced lines' text (needed for code-metric features; counts-only exports
    simply omit it).
    """

    start_line: int
    old_lines: int
    new_lines: int
    added_text: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FileChange:
    path: str
    action: ChangeAction
    storage_type: StorageType
    lines_added: int
    lines_deleted: int
    lines_edited: int
    hunks: tuple[Hunk, ...]
    file_size: int
    is_code: bool
    move_from: str | None = None  # source path for move_add/branch/integrate


@dataclass(frozen=True)
class TestCase:
    id: str
    title: str
    area: str
    automated: bool
    created_on: date


@dataclass(frozen=True)
class TestRun:
    test_id: str
    status: RunStatus
    tested_on: date
    duration_hours: float
    found_bug_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class BugReport:
    id: str
    severity: int  # ordinal 1..5
    opened_on: date
    status: BugStatus
    area: str
    fixed_by_commit: str | None = None


@dataclass(frozen=True)
class Commit:
    id: str
    author: str
    timestamp: datetime  # tz-aware UTC
    message: str
    changes: tuple[FileChange, ...]
    linked_issue_keys: tuple[str, ...] = ()


@dataclass(frozen=True)
class TelemetryRecord:
    area: str
    avg_distribution: float  # fraction in [0,1]
    avg_stickiness: float  # fraction in [0,1]
    window_start: date
    window_end: date


RECORD_TYPES = ("test_case", "test_run", "bug", "commit", "telemetry")

DomainRecord = TestCase | TestRun | BugReport | Commit | TelemetryRecord


def parse_date(raw: Any, field_name: str) -> date:
    """Parse an ISO date (or datetime, reduced to its UTC date)."""
    if isinstance(raw, date) and not isinstance(raw, datetime):
        return raw
    if not isinstance(raw, str):
        raise MalformedDate(f"{field_name}: expected ISO date string, got {raw!r}")
    try:
        if "T" in raw or " " in raw.strip():
            return parse_timestamp(raw, field_name).date()
        return date.fromisoformat(raw)
    except MalformedDate:
        raise
    except ValueError:
        raise MalformedDate(f"{field_name}: {raw!r} is not an ISO date") from None


def parse_timestamp(raw: Any, field_name: str) -> datetime:
    """Parse an ISO datetime; naive values are taken as UTC, aware ones converted."""
    if isinstance(raw, datetime):
        dt = raw
    elif isinstance(raw, str):
        try:
            dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
        except ValueError:
            raise MalformedDate(f"{field_name}: {raw!r} is not an ISO datetime") from None
    else:
        raise MalformedDate(f"{field_name}: expected ISO datetime string, got {raw!r}")
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def days_between(later: date, earlier: date) -> int:
    """Whole-day floor of the elapsed time between two dates."""
    return (later - earlier).days


def _require(raw: Mapping, key: str) -> Any:
    if key not in raw or raw[key] is None:
        raise InvariantViolation(key, f"missing required field {key!r}")
    return raw[key]


def _string(raw: Mapping, key: str, *, non_empty: bool = True) -> str:
    value = _require(raw, key)
    if not isinstance(value, str):
        raise InvariantViolation(key, f"{key} must be a string, got {type(value).__name__}")
    if non_empty and not value.strip():
        raise InvariantViolation(key, f"{key} must be non-empty")
    return value


def _number(raw: Mapping, key: str, *, minimum: float | None = None,
            maximum: float | None = None) -> float:
    value = _require(raw, key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvariantViolation(key, f"{key} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise InvariantViolation(key, f"{key} must be finite, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvariantViolation(key, f"{key} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise InvariantViolation(key, f"{key} must be <= {maximum}, got {value}")
    return value


def _count(raw: Mapping, key: str) -> int:
    value = _number(raw, key, minimum=0)
    if value != int(value):
        raise InvariantViolation(key, f"{key} must be an integer count, got {value}")
    return int(value)


def _boolean(raw: Mapping, key: str) -> bool:
    value = _require(raw, key)
    if not isinstance(value, bool):
        raise InvariantViolation(key, f"{key} must be a boolean, got {value!r}")
    return value


def _enum(raw: Mapping, key: str, enum_cls: type) -> Any:
    value = _string(raw, key)
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise InvariantViolation(key, f"{key} must be one of {{{allowed}}}, got {value!r}") from None


def _string_list(raw: Mapping, key: str) -> tuple[str, ...]:
    value = raw.get(key, [])
    if value is None:
        return ()
    if not isinstance(value, (list, tuple)):
        raise InvariantViolation(key, f"{key} must be a list of strings")
    out = []
    for item in value:
        if not isinstance(item, str):
            raise InvariantViolation(key, f"{key} entries must be strings, got {item!r}")
        out.append(item)
    return tuple(out)


def extract_issue_keys(message: str, pattern: str = DEFAULT_ISSUE_KEY_PATTERN) -> tuple[str, ...]:
    """Issue keys referenced by a commit message, in order, deduplicated."""
    seen: dict[str, None] = {}
    for match in re.finditer(pattern, message):
        seen.setdefault(match.group(0))
    return tuple(seen)


def _validate_hunk(raw: Any, index: int) -> Hunk:
    key = f"hunks[{index}]"
    if isinstance(raw, (list, tuple)):
        if len(raw) != 3:
            raise InvariantViolation(key, f"{key} must be [start_line, old_lines, new_lines]")
        doc: Mapping = {"start_line": raw[0], "old_lines": raw[1], "new_lines": raw[2]}
    elif isinstance(raw, Mapping):
        doc = raw
    else:
        raise InvariantViolation(key, f"{key} must be a list or object")
    start = _count(doc, "start_line")
    old = _count(doc, "old_lines")
    new = _count(doc, "new_lines")
    if start < 1:
        raise InvariantViolation(key, f"{key}.start_line must be >= 1")
    added_text: tuple[str, ...] | None = None
    if doc.get("added_text") is not None:
        texts = doc["added_text"]
        if not isinstance(texts, (list, tuple)) or not all(isinstance(t, str) for t in texts):
            raise InvariantViolation(key, f"{key}.added_text must be a list of strings")
        if len(texts) != new:
            raise InvariantViolation(
                key, f"{key}.added_text has {len(texts)} lines, new_lines says {new}")
        added_text = tuple(texts)
    return Hunk(start, old, new, added_text)


def _validate_file_change(raw: Any, index: int) -> FileChange:
    key = f"changes[{index}]"
    if not isinstance(raw, Mapping):
        raise InvariantViolation(key, f"{key} must be an object")
    path = _string(raw, "path")
    action = _enum(raw, "action", ChangeAction)
    storage = _enum(raw, "storage_type", StorageType)
    added = _count(raw, "lines_added")
    deleted = _count(raw, "lines_deleted")
    edited = _count(raw, "lines_edited")
    hunks = tuple(_validate_hunk(h, i) for i, h in enumerate(raw.get("hunks") or []))
    file_size = _count(raw, "file_size")
    is_code = _boolean(raw, "is_code")
    move_from = raw.get("move_from")
    if move_from is not None and not isinstance(move_from, str):
        raise InvariantViolation("move_from", "move_from must be a string path")

    if action is ChangeAction.ADD and deleted != 0:
        raise InvariantViolation("lines_deleted", "an add-action change cannot delete lines")
    if action is ChangeAction.DELETE and added != 0:
        raise InvariantViolation("lines_added", "a delete-action change cannot add lines")
    if hunks:
        # An edited line consumes one pre-image and produces one post-image line.
        old_total = sum(h.old_lines for h in hunks)
        new_total = sum(h.new_lines for h in hunks)
        if old_total != deleted + edited:
            raise InvariantViolation(
                "hunks", f"hunk pre-image total {old_total} != lines_deleted+lines_edited "
                         f"{deleted + edited} for {path}")
        if new_total != added + edited:
            raise InvariantViolation(
                "hunks", f"hunk post-image total {new_total} != lines_added+lines_edited "
                         f"{added + edited} for {path}")
    return FileChange(path, action, storage, added, deleted, edited, hunks,
                      file_size, is_code, move_from)


def validate_record(raw: Mapping, *, issue_key_pattern: str = DEFAULT_ISSUE_KEY_PATTERN,
                    today: date | None = None) -> DomainRecord:
    """Validate one tagged raw document into its typed domain value.

    Raises :class:`UnknownTag`, :class:`InvariantViolation` (naming the field)
    or :class:`MalformedDate`. Never returns a partially valid value.
    """
    if not isinstance(raw, Mapping):
        raise InvariantViolation("record", "record must be a JSON object")
    tag = raw.get("type")
    if tag not in RECORD_TYPES:
        raise UnknownTag(f"unknown record type tag {tag!r}", tag=tag)
    today = today or datetime.now(timezone.utc).date()

    if tag == "test_case":
        created = parse_date(_require(raw, "created_on"), "created_on")
        if created > today:
            raise InvariantViolation("created_on", f"created_on {created} is in the future")
        return TestCase(
            id=_string(raw, "id"),
            title=_string(raw, "title", non_empty=False),
            area=_string(raw, "area"),
            automated=_boolean(raw, "automated"),
            created_on=created,
        )

    if tag == "test_run":
        return TestRun(
            test_id=_string(raw, "test_id"),
            status=_enum(raw, "status", RunStatus),
            tested_on=parse_date(_require(raw, "tested_on"), "tested_on"),
            duration_hours=_number(raw, "duration_hours", minimum=0.0),
            found_bug_ids=_string_list(raw, "found_bug_ids"),
        )

    if tag == "bug":
        severity = _count(raw, "severity")
        if not 1 <= severity <= 5:
            raise InvariantViolation("severity", f"severity must be in 1..5, got {severity}")
        status = _enum(raw, "status", BugStatus)
        fixed_by = raw.get("fixed_by_commit")
        if fixed_by is not None and not isinstance(fixed_by, str):
            raise InvariantViolation("fixed_by_commit", "fixed_by_commit must be a string id")
        if status is BugStatus.OPEN and fixed_by is not None:
            raise InvariantViolation("fixed_by_commit", "an open bug cannot name a fix commit")
        return BugReport(
            id=_string(raw, "id"),
            severity=severity,
            opened_on=parse_date(_require(raw, "opened_on"), "opened_on"),
            status=status,
            area=_string(raw, "area"),
            fixed_by_commit=fixed_by,
        )

    if tag == "commit":
        changes_raw = _require(raw, "changes")
        if not isinstance(changes_raw, (list, tuple)) or not changes_raw:
            raise InvariantViolation("changes", "changes must be a non-empty list")
        message = _string(raw, "message", non_empty=False)
        keys = raw.get("linked_issue_keys")
        if keys is None:
            linked = extract_issue_keys(message, issue_key_pattern)
        else:
            linked = _string_list(raw, "linked_issue_keys")
        return Commit(
            id=_string(raw, "id"),
            author=_string(raw, "author"),
            timestamp=parse_timestamp(_require(raw, "timestamp"), "timestamp"),
            message=message,
            changes=tuple(_validate_file_change(c, i) for i, c in enumerate(changes_raw)),
            linked_issue_keys=linked,
        )

    # telemetry
    start = parse_date(_require(raw, "window_start"), "window_start")
    end = parse_date(_require(raw, "window_end"), "window_end")
    if end < start:
        raise InvariantViolation("window_end", "window_end precedes window_start")
    return TelemetryRecord(
        area=_string(raw, "area"),
        avg_distribution=_number(raw, "avg_distribution", minimum=0.0, maximum=1.0),
        avg_stickiness=_number(raw, "avg_stickiness", minimum=0.0, maximum=1.0),
        window_start=start,
        window_end=end,
    )


_TAG_BY_TYPE = {
    TestCase: "test_case",
    TestRun: "test_run",
    BugReport: "bug",
    Commit: "commit",
    TelemetryRecord: "telemetry",
}


def serialize_record(value: DomainRecord) -> dict:
    """Inverse of :func:`validate_record`: a plain tagged document."""

    def convert(obj: Any) -> Any:
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, datetime):
            return obj.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
        if isinstance(obj, date):
            return obj.isoformat()
        if isinstance(obj, tuple):
            return [convert(x) for x in obj]
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)
                    if getattr(obj, f.name) is not None}
        return obj

    doc = convert(value)
    doc["type"] = _TAG_BY_TYPE[type(value)]
    return doc


def read_records(lines: Iterable[str], *, issue_key_pattern: str = DEFAULT_ISSUE_KEY_PATTERN,
                 today: date | None = None) -> Iterator[DomainRecord]:
    """Parse newline-delimited tagged documents, skipping blank lines."""
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvariantViolation("record", f"line {line_no}: not valid JSON ({exc.msg})") from None
        yield validate_record(raw, issue_key_pattern=issue_key_pattern, today=today)


def load_records(path: str, **kwargs: Any) -> list[DomainRecord]:
    with open(path, "r", encoding="utf-8") as handle:
        return list(read_records(handle, **kwargs))


def dump_records(values: Iterable[DomainRecord]) -> str:
    return "".join(json.dumps(serialize_record(v), sort_keys=True) + "\n" for v in values)


@dataclass
class Dataset:
    """A validated bundle of everything one scoring pass works over."""

    tests: dict[str, TestCase] = field(default_factory=dict)
    runs: list[TestRun] = field(default_factory=list)
    bugs: dict[str, BugReport] = field(default_factory=dict)
    commits: list[Commit] = field(default_factory=list)
    telemetry: list[TelemetryRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Iterable[DomainRecord]) -> "Dataset":
        data = cls()
        for record in records:
            if isinstance(record, TestCase):
                if record.id in data.tests:
                    raise InvariantViolation("id", f"duplicate test case id {record.id!r}")
                data.tests[record.id] = record
            elif isinstance(record, TestRun):
                data.runs.append(record)
            elif isinstance(record, BugReport):
                if record.id in data.bugs:
                    raise InvariantViolation("id", f"duplicate bug id {record.id!r}")
                data.bugs[record.id] = record
            elif isinstance(record, Commit):
                data.commits.append(record)
            else:
                data.telemetry.append(record)
        data.commits.sort(key=lambda c: (c.timestamp, c.id))
        data.runs.sort(key=lambda r: (r.tested_on, r.test_id))
        return data

    def runs_for(self, test_id: str) -> list[TestRun]:
        return [r for r in self.runs if r.test_id == test_id]

    def bugs_in_area(self, area: str) -> list[BugReport]:
        return [b for b in self.bugs.values() if b.area == area]
