"""Commit feature vectors for defect prediction.

Each commit becomes a fixed-order numeric vector combining file properties,
code properties, commit action properties and developer properties:

* array-valued properties (per-file revision count, size, path depth, time
  since last touch, developer count, code-file age, token count, complexity)
  are reduced to their statistical spread: min, max, mean, median;
* a ``...User`` variant carries the author's historical mean of the feature
  over their *prior* commits only, so streaming extraction in commit order
  and batch recomputation agree bit for bit (no temporal leakage);
* a ``...Prev`` variant carries the metric recomputed against the file
  contents just before the commit; files with no pre-image contribute 0.

Code metrics come from a lexical pass over a C-like token set; they need file
text, which the ingestion format can carry per hunk. Counts-only ingestion
yields zero code metrics, everything else still works.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EngineError
from .model import ChangeAction, Commit, FileChange, StorageType
from .szz import RepoModel

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"

DAY_SECONDS = 86400.0


class AllZeroModifications(EngineError):
    code = "features_all_zero"


class EmptyArray(EngineError):
    code = "features_empty_array"


class NotACodeFile(EngineError):
    code = "features_not_code"


class UndecodableText(EngineError):
    code = "features_undecodable"


class SchemaMismatch(EngineError):
    code = "features_schema_mismatch"


@dataclass(frozen=True)
class FeatureConfig:
    complexity_threshold: float = 10.0


# Feature families. USER_FEATURES gain a "<name>User" author-history variant,
# PREV_SCALARS a "<name>Prev" variant, SPREAD_FEATURES expand to
# Min/Max/Mean/Median, SPREAD_PREV_FEATURES do both.
USER_FEATURES = (
    "nFiles", "nCodeFiles", "nUniqueDir", "nWorkDir",
    "nLinesAdded", "nLinesEdited", "nLinesDeleted", "nLinesModified",
    "nLinesAddedNewFiles", "nLinesDeletedRemovedFiles",
    "nActionAdd", "nActionEdit", "nActionDelete", "nActionMoveAdd",
    "nActionMoveDelete", "nActionBranch", "nActionIntegrate",
)
PREV_SCALARS = ("nLinesTotal", "nFunctions", "nFunctionParameters",
                "nComments", "nImports")
SPREAD_FEATURES = ("revision", "fileSize", "pathDepth", "lastModifiedElapsed",
                   "developers", "ageCodeFile")
SPREAD_PREV_FEATURES = ("nTokens", "codeComplexity")
PLAIN_SCALARS = ("nFileTypes", "nCodeFileTypes", "entropy",
                 "nStorageTypeText", "nStorageTypeUtf", "nStorageTypeBinary",
                 "fileSizeTotal", "developersTotal", "ageUser",
                 "codeComplexityAboveThresholdDiff")

SPREAD_SUFFIXES = ("Min", "Max", "Mean", "Median")


def schema_names() -> tuple[str, ...]:
    """The fixed feature ordering for schema version 1."""
    names: list[str] = []
    for name in USER_FEATURES:
        names.append(name)
        names.append(name + "User")
    for name in ("nFileTypes", "nCodeFileTypes"):
        names.append(name)
    for name in ("nLinesTotal",):
        names.append(name)
        names.append(name + "Prev")
    names.append("entropy")
    names.extend(["nStorageTypeText", "nStorageTypeUtf", "nStorageTypeBinary"])
    for name in SPREAD_FEATURES:
        names.extend(name + suffix for suffix in SPREAD_SUFFIXES)
    names.append("fileSizeTotal")
    names.append("developersTotal")
    names.append("ageUser")
    for name in SPREAD_PREV_FEATURES:
        names.extend(name + suffix for suffix in SPREAD_SUFFIXES)
        names.extend(name + "Prev" + suffix for suffix in SPREAD_SUFFIXES)
    for name in ("nFunctions", "nFunctionParameters", "nComments", "nImports"):
        names.append(name)
        names.append(name + "Prev")
    names.append("codeComplexityAboveThresholdDiff")
    return tuple(names)


SCHEMA_NAMES = schema_names()
SCHEMA_INDEX = {name: i for i, name in enumerate(SCHEMA_NAMES)}


@dataclass(frozen=True)
class FeatureVector:
    commit_id: str
    values: np.ndarray  # float64, len == len(SCHEMA_NAMES)
    schema_version: str = SCHEMA_VERSION

    def __getitem__(self, name: str) -> float:
        return float(self.values[SCHEMA_INDEX[name]])

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(SCHEMA_NAMES, self.values)}


@dataclass
class UserHistory:
    """Running per-author aggregates over commits seen so far."""

    counts: dict[str, int] = field(default_factory=dict)
    sums: dict[str, dict[str, float]] = field(default_factory=dict)
    first_commit_at: dict[str, datetime] = field(default_factory=dict)

    def prior_mean(self, author: str, feature: str) -> float:
        n = self.counts.get(author, 0)
        if n == 0:
            return 0.0
        return self.sums[author].get(feature, 0.0) / n

    def age_days(self, author: str, now: datetime) -> float:
        first = self.first_commit_at.get(author)
        if first is None:
            return 0.0
        return (now - first).total_seconds() / DAY_SECONDS

    def record(self, author: str, now: datetime,
               features: Mapping[str, float]) -> None:
        if author not in self.first_commit_at:
            self.first_commit_at[author] = now
        self.counts[author] = self.counts.get(author, 0) + 1
        sums = self.sums.setdefault(author, {})
        for name, value in features.items():
            sums[name] = sums.get(name, 0.0) + value


def entropy(modifications: Sequence[float]) -> float:
    """Normalized Shannon entropy of per-file modified-line counts.

    0 for a single file (no variability), 1 at a uniform distribution over
    n > 1 files. Base-independent thanks to the log(n) normalization.
    """
    if any(m < 0 for m in modifications):
        raise AllZeroModifications("modification counts cannot be negative")
    total = float(sum(modifications))
    if total <= 0:
        raise AllZeroModifications("at least one modification count must be positive")
    n = len(modifications)
    if n == 1:
        return 0.0
    h = 0.0
    for count in modifications:
        if count > 0:
            p = count / total
            h -= p * math.log(p)
    return h / math.log(n)


def spread(values: Sequence[float]) -> tuple[float, float, float, float]:
    """(min, max, mean, median); even-length median is the central midpoint."""
    if len(values) == 0:
        raise EmptyArray("spread of an empty array is undefined")
    ordered = sorted(float(v) for v in values)
    n = len(ordered)
    mean = sum(ordered) / n
    if n % 2:
        median = ordered[n // 2]
    else:
        median = (ordered[n // 2 - 1] + ordered[n // 2]) / 2.0
    return ordered[0], ordered[-1], mean, median


@dataclass(frozen=True)
class CodeMetrics:
    n_tokens: int
    n_functions: int
    n_function_parameters: int
    n_comments: int
    n_imports: int
    complexity: int


_TOKEN_RE = re.compile(r"""
    (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>\d+(\.\d*)?([eE][+-]?\d+)?|\.\d+)
  | (?P<op>&&|\|\||<<=|>>=|==|!=|<=|>=|->|\+\+|--|\+=|-=|\*=|/=|::|<<|>>)
  | (?P<punct>[{}()\[\];,.:?~!%^&*+=|<>/-])
""", re.VERBOSE)

_BRANCH_KEYWORDS = frozenset({"if", "for", "while", "case", "catch"})
_BRANCH_OPS = frozenset({"&&", "||", "?"})
_CONTROL_KEYWORDS = frozenset({"if", "for", "while", "switch", "catch", "return",
                               "sizeof", "do", "else"})
_IMPORT_RE = re.compile(r"^\s*(#\s*include\b|import\b|using\b|from\s+\S+\s+import\b)")


def _strip_comments_and_strings(text: str) -> tuple[str, int]:
    """Blank out comments and collapse string literals; returns comment count.

    String literals are replaced by a placeholder token so their contents
    never look like keywords; comments are replaced by whitespace so line
    structure (for import detection) survives.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    comments = 0
    while i < n:
        ch = text[i]
        two = text[i:i + 2]
        if two == "//":
            comments += 1
            while i < n and text[i] != "\n":
                i += 1
            continue
        if two == "/*":
            comments += 1
            i += 2
            while i < n and text[i:i + 2] != "*/":
                out.append("\n" if text[i] == "\n" else " ")
                i += 1
            i += 2
            continue
        if ch in ("\"", "'"):
            quote = ch
            i += 1
            while i < n and text[i] != quote:
                if text[i] == "\\":
                    i += 1
                i += 1
            i += 1
            out.append(" _str_ ")
            continue
        out.append(ch)
        i += 1
    return "".join(out), comments


def code_metrics(text: str) -> CodeMetrics:
    """Lexical metrics over a C-like token set.

    Complexity is 1 plus the number of branch points (if/for/while/case/catch
    keywords and &&, ||, ? operators). Functions are identifier-plus-parameter
    -list-plus-block occurrences; control keywords do not count.
    """
    if not isinstance(text, str):
        raise UndecodableText("code metrics need decoded text")
    stripped, comments = _strip_comments_and_strings(text)

    imports = sum(1 for line in stripped.splitlines() if _IMPORT_RE.match(line))

    tokens = [m.group(0) for m in _TOKEN_RE.finditer(stripped)]
    complexity = 1
    for token in tokens:
        if token in _BRANCH_KEYWORDS or token in _BRANCH_OPS:
            complexity += 1

    functions = 0
    parameters = 0
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if (re.match(r"[A-Za-z_]", token) and token not in _CONTROL_KEYWORDS
                and i + 1 < len(tokens) and tokens[i + 1] == "("):
            j = i + 2
            depth = 1
            commas = 0
            non_empty = False
            while j < len(tokens) and depth:
                if tokens[j] == "(":
                    depth += 1
                elif tokens[j] == ")":
                    depth -= 1
                elif tokens[j] == "," and depth == 1:
                    commas += 1
                if depth and tokens[j] != ")":
                    non_empty = True
                j += 1
            if j < len(tokens) and tokens[j] == "{":
                functions += 1
                parameters += (commas + 1) if non_empty else 0
                i = j
        i += 1

    return CodeMetrics(
        n_tokens=len(tokens),
        n_functions=functions,
        n_function_parameters=parameters,
        n_comments=comments,
        n_imports=imports,
        complexity=complexity,
    )


def _safe_metrics(content: str | None) -> CodeMetrics | None:
    if content is None:
        return None
    return code_metrics(content)


def _spread_or_zeros(values: Sequence[float]) -> tuple[float, float, float, float]:
    if not values:
        return 0.0, 0.0, 0.0, 0.0
    return spread(values)


def extract_features(commit: Commit, repo: RepoModel, history: UserHistory,
                     config: FeatureConfig = FeatureConfig()) -> FeatureVector:
    """Populate every schema slot for one commit.

    ``history`` must reflect only earlier commits; callers extracting a whole
    dataset should use :func:`extract_dataset`, which threads the history in
    commit order and records each commit after its vector is built.
    """
    index = repo.index_of(commit.id)
    prev_commit_id = repo.commits[index - 1].id if index > 0 else None
    raw: dict[str, float] = {}

    changes = commit.changes
    code_changes = [c for c in changes if c.is_code]
    new_file_actions = (ChangeAction.ADD, ChangeAction.BRANCH)

    raw["nFiles"] = float(len(changes))
    raw["nCodeFiles"] = float(len(code_changes))
    raw["nFileTypes"] = float(len({_suffix(c.path) for c in changes}))
    raw["nCodeFileTypes"] = float(len({_suffix(c.path) for c in code_changes}))
    raw["nUniqueDir"] = float(len({_dirname(c.path) for c in changes}))
    raw["nWorkDir"] = float(len({_top_dir(c.path) for c in changes}))
    raw["nLinesAdded"] = float(sum(c.lines_added for c in changes))
    raw["nLinesEdited"] = float(sum(c.lines_edited for c in changes))
    raw["nLinesDeleted"] = float(sum(c.lines_deleted for c in changes))
    raw["nLinesModified"] = (raw["nLinesAdded"] + raw["nLinesEdited"]
                             + raw["nLinesDeleted"])
    raw["nLinesAddedNewFiles"] = float(sum(
        c.lines_added for c in changes if c.action in new_file_actions))
    raw["nLinesDeletedRemovedFiles"] = float(sum(
        c.lines_deleted for c in changes if c.action is ChangeAction.DELETE))

    for action in ChangeAction:
        name = "nAction" + "".join(part.capitalize() for part in action.value.split("_"))
        raw[name] = float(sum(1 for c in changes if c.action is action))

    raw["nStorageTypeText"] = float(sum(
        1 for c in changes if c.storage_type is StorageType.TEXT))
    raw["nStorageTypeUtf"] = float(sum(
        1 for c in changes if c.storage_type is StorageType.UTF))
    raw["nStorageTypeBinary"] = float(sum(
        1 for c in changes if c.storage_type is StorageType.BINARY))

    mods = [float(c.lines_added + c.lines_edited + c.lines_deleted) for c in changes]
    try:
        raw["entropy"] = entropy(mods)
    except AllZeroModifications:
        raw["entropy"] = 0.0

    raw["fileSizeTotal"] = float(sum(c.file_size for c in changes))

    # Per-file facts from the line-history index; deleted files have no
    # post-state and are skipped from the array features.
    revisions: list[float] = []
    elapsed: list[float] = []
    developers: list[float] = []
    code_ages: list[float] = []
    all_authors: set[str] = set()
    line_total = 0.0
    line_total_prev = 0.0
    for change in changes:
        if change.action in (ChangeAction.DELETE, ChangeAction.MOVE_DELETE):
            continue
        facts = repo.file_facts(change.path, commit.id)
        if facts is None:
            continue
        revisions.append(float(facts["revision"]))
        if facts["previous_touch_at"] is not None:
            delta = (commit.timestamp - facts["previous_touch_at"]).total_seconds()
            elapsed.append(delta / DAY_SECONDS)
        else:
            elapsed.append(0.0)
        developers.append(float(len(facts["authors"])))
        all_authors.update(facts["authors"])
        line_total += float(facts["line_count"])
        if change.is_code:
            age = (commit.timestamp - facts["created_at"]).total_seconds()
            code_ages.append(max(age, 0.0) / DAY_SECONDS)
        prev_path = change.move_from if change.action is ChangeAction.MOVE_ADD else change.path
        if prev_commit_id is not None and change.action not in new_file_actions:
            prev_facts = repo.file_facts(prev_path, prev_commit_id) if prev_path else None
            if prev_facts is not None:
                line_total_prev += float(prev_facts["line_count"])

    for name, values in (("revision", revisions), ("pathDepth", None),
                         ("lastModifiedElapsed", elapsed),
                         ("developers", developers), ("ageCodeFile", code_ages)):
        if name == "pathDepth":
            values = [float(c.path.count("/")) for c in changes]
        mn, mx, mean, median = _spread_or_zeros(values or [])
        raw[name + "Min"], raw[name + "Max"] = mn, mx
        raw[name + "Mean"], raw[name + "Median"] = mean, median

    sizes = [float(c.file_size) for c in changes]
    mn, mx, mean, median = _spread_or_zeros(sizes)
    raw["fileSizeMin"], raw["fileSizeMax"] = mn, mx
    raw["fileSizeMean"], raw["fileSizeMedian"] = mean, median

    raw["developersTotal"] = float(len(all_authors))
    raw["ageUser"] = history.age_days(commit.author, commit.timestamp)
    raw["nLinesTotal"] = line_total
    raw["nLinesTotalPrev"] = line_total_prev

    # Code metrics over current and pre-commit content.
    tokens_now: list[float] = []
    tokens_prev: list[float] = []
    complexity_now: list[float] = []
    complexity_prev: list[float] = []
    scalars_now = {"nFunctions": 0.0, "nFunctionParameters": 0.0,
                   "nComments": 0.0, "nImports": 0.0}
    scalars_prev = dict(scalars_now)
    crossings = 0
    for change in code_changes:
        if change.storage_type is StorageType.BINARY:
            continue
        if change.action in (ChangeAction.DELETE, ChangeAction.MOVE_DELETE):
            continue
        current = _safe_metrics(repo.file_content(change.path, commit.id))
        prev_metrics: CodeMetrics | None = None
        prev_path = change.move_from if change.action is ChangeAction.MOVE_ADD else change.path
        if change.action in new_file_actions:
            logger.debug("no pre-image for %s in %s; Prev metrics default to 0",
                         change.path, commit.id)
        elif prev_commit_id is not None and prev_path:
            prev_metrics = _safe_metrics(repo.file_content(prev_path, prev_commit_id))
        if current is not None:
            tokens_now.append(float(current.n_tokens))
            complexity_now.append(float(current.complexity))
            scalars_now["nFunctions"] += current.n_functions
            scalars_now["nFunctionParameters"] += current.n_function_parameters
            scalars_now["nComments"] += current.n_comments
            scalars_now["nImports"] += current.n_imports
        tokens_prev.append(float(prev_metrics.n_tokens) if prev_metrics else 0.0)
        complexity_prev.append(float(prev_metrics.complexity) if prev_metrics else 0.0)
        if prev_metrics is not None:
            scalars_prev["nFunctions"] += prev_metrics.n_functions
            scalars_prev["nFunctionParameters"] += prev_metrics.n_function_parameters
            scalars_prev["nComments"] += prev_metrics.n_comments
            scalars_prev["nImports"] += prev_metrics.n_imports
        before = float(prev_metrics.complexity) if prev_metrics else 0.0
        after = float(current.complexity) if current else 0.0
        if (before > config.complexity_threshold) != (after > config.complexity_threshold):
            crossings += 1

    for name, values in (("nTokens", tokens_now), ("codeComplexity", complexity_now)):
        mn, mx, mean, median = _spread_or_zeros(values)
        raw[name + "Min"], raw[name + "Max"] = mn, mx
        raw[name + "Mean"], raw[name + "Median"] = mean, median
    for name, values in (("nTokensPrev", tokens_prev),
                         ("codeComplexityPrev", complexity_prev)):
        mn, mx, mean, median = _spread_or_zeros(values)
        raw[name + "Min"], raw[name + "Max"] = mn, mx
        raw[name + "Mean"], raw[name + "Median"] = mean, median

    for name in ("nFunctions", "nFunctionParameters", "nComments", "nImports"):
        raw[name] = scalars_now[name]
        raw[name + "Prev"] = scalars_prev[name]
    raw["codeComplexityAboveThresholdDiff"] = float(crossings)

    for name in USER_FEATURES:
        raw[name + "User"] = history.prior_mean(commit.author, name)

    values = np.array([raw[name] for name in SCHEMA_NAMES], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = [SCHEMA_NAMES[i] for i in np.where(~np.isfinite(values))[0]]
        raise SchemaMismatch(f"non-finite feature value(s) for {commit.id}: {bad}")
    return FeatureVector(commit_id=commit.id, values=values)


def history_features(vector: FeatureVector) -> dict[str, float]:
    """The slice of a vector the author history accumulates."""
    return {name: vector[name] for name in USER_FEATURES}


def extract_dataset(repo: RepoModel, config: FeatureConfig = FeatureConfig()
                    ) -> list[FeatureVector]:
    """Extract vectors for every commit, threading author history in order."""
    history = UserHistory()
    vectors: list[FeatureVector] = []
    for commit in repo.commits:
        vector = extract_features(commit, repo, history, config)
        vectors.append(vector)
        history.record(commit.author, commit.timestamp, history_features(vector))
    return vectors


def dataset_to_csv(vectors: Sequence[FeatureVector],
                   labels: Mapping[str, bool] | None = None) -> str:
    """Dataset export: schema-stamped header plus one numeric row per commit."""
    lines = [f"# feature_schema: {SCHEMA_VERSION}"]
    header = ["commit_id", *SCHEMA_NAMES]
    if labels is not None:
        header.append("label")
    lines.append(",".join(header))
    for vector in vectors:
        row = [vector.commit_id] + [repr(float(v)) for v in vector.values]
        if labels is not None:
            row.append(str(int(labels.get(vector.commit_id, False))))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _suffix(path: str) -> str:
    name = path.rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[-1].lower() if "." in name else ""


def _dirname(path: str) -> str:
    return path.rsplit("/", 1)[0] if "/" in path else ""


def _top_dir(path: str) -> str:
    return path.split("/", 1)[0] if "/" in path else ""
