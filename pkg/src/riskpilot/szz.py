"""Label bug-inducing commits by tracing fixes back through line history.

The heuristic: link bug reports to the commits that fixed them, extract the
fix's modified pre-image lines, blame each of those lines as of the commit
just before the fix, and treat the blamed commits as inducing candidates.
Candidates committed after the bug was reported are ruled out; candidates
that are themselves fix commits can optionally be parked as "suspects"
instead of labeled (partial-fix handling).

:class:`RepoModel` is an in-memory line-provenance index built from ingested
commit records, so labeling needs no version-control system installed. File
identity survives renames (move_add/move_delete pairs) and branch copies, and
blame queries honor the "as of" commit: they never return later commits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Mapping, Sequence

from .errors import EngineError
from .model import (BugReport, ChangeAction, Commit, FileChange, StorageType)

# One tracked line: (origin commit id or None when the history window starts
# after the line appeared, line text or None when the export carried counts only).
Line = tuple[str | None, str | None]


class NoTextChanges(EngineError):
    code = "szz_no_text_changes"


class FileUnknownAtCommit(EngineError):
    code = "szz_file_unknown"


class RepoInconsistent(EngineError):
    code = "szz_repo_inconsistent"


class UnknownCommit(EngineError):
    code = "szz_unknown_commit"


@dataclass(frozen=True)
class FixLink:
    bug_id: str
    fix_commit_id: str
    confidence: str  # explicit_key | tracker_field


@dataclass(frozen=True)
class Evidence:
    bug_id: str
    file: str
    line_start: int  # fix pre-image coordinates
    line_end: int


@dataclass(frozen=True)
class InducingLabel:
    commit_id: str
    is_bug_inducing: bool
    evidence: tuple[Evidence, ...] = ()


@dataclass(frozen=True)
class LabelReport:
    labels: tuple[InducingLabel, ...]
    links: tuple[FixLink, ...]
    unlinked_bugs: tuple[str, ...]
    suspects: tuple[str, ...]  # partial-fix candidates parked for review


class _FileState:
    """One file identity: line snapshots per touching commit, across renames."""

    __slots__ = ("versions", "touch_indices", "authors", "created_index")

    def __init__(self, created_index: int):
        self.versions: list[tuple[int, tuple[Line, ...]]] = []
        self.touch_indices: list[int] = []
        self.authors: list[str] = []
        self.created_index = created_index

    def record(self, index: int, lines: tuple[Line, ...], author: str) -> None:
        self.versions.append((index, lines))
        self.touch_indices.append(index)
        self.authors.append(author)

    def lines_at(self, index: int) -> tuple[Line, ...] | None:
        found: tuple[Line, ...] | None = None
        for at, lines in self.versions:
            if at > index:
                break
            found = lines
        return found


def _apply_hunks(lines: list[Line], change: FileChange, commit_id: str,
                 path: str) -> list[Line]:
    hunks = sorted(change.hunks, key=lambda h: h.start_line)
    prev_end = 0
    for hunk in hunks:
        if hunk.start_line <= prev_end:
            raise RepoInconsistent(
                f"{commit_id}: overlapping hunks in {path}")
        prev_end = hunk.start_line + max(hunk.old_lines - 1, 0)
    # Descending order keeps earlier hunks' coordinates valid while splicing.
    for hunk in reversed(hunks):
        start = hunk.start_line - 1
        if hunk.old_lines and start + hunk.old_lines > len(lines):
            # History window opened after this file appeared; pad unknowns.
            lines.extend([(None, None)] * (start + hunk.old_lines - len(lines)))
        if not hunk.old_lines and start > len(lines):
            lines.extend([(None, None)] * (start - len(lines)))
        new_lines: list[Line]
        if hunk.added_text is not None:
            new_lines = [(commit_id, text) for text in hunk.added_text]
        else:
            new_lines = [(commit_id, None)] * hunk.new_lines
        lines[start:start + hunk.old_lines] = new_lines
    return lines


class RepoModel:
    """Commits in timestamp order plus a per-file line-history index."""

    def __init__(self, commits: Sequence[Commit]):
        ordered = sorted(commits, key=lambda c: (c.timestamp, c.id))
        for earlier, later in zip(ordered, ordered[1:]):
            if later.timestamp < earlier.timestamp:
                raise RepoInconsistent("commit timestamps decrease along the chain")
        self.commits: tuple[Commit, ...] = tuple(ordered)
        self._index: dict[str, int] = {c.id: i for i, c in enumerate(self.commits)}
        if len(self._index) != len(self.commits):
            raise RepoInconsistent("duplicate commit ids")
        # path -> [(commit index, state or None)]; None marks deletion.
        self._paths: dict[str, list[tuple[int, _FileState | None]]] = {}
        self._replay()

    # -- construction ------------------------------------------------------

    def _replay(self) -> None:
        for index, commit in enumerate(self.commits):
            moves = self._pair_moves(commit)
            for change in commit.changes:
                if change.action is ChangeAction.MOVE_DELETE:
                    if change.path not in moves.values():
                        self._close_path(change.path, index)
                    continue
                self._apply_change(index, commit, change, moves)

    def _pair_moves(self, commit: Commit) -> dict[str, str]:
        """Map move_add path -> source path, honoring explicit move_from."""
        adds = [c for c in commit.changes if c.action is ChangeAction.MOVE_ADD]
        deletes = [c.path for c in commit.changes
                   if c.action is ChangeAction.MOVE_DELETE]
        pairs: dict[str, str] = {}
        free_deletes = [p for p in deletes]
        for add in adds:
            if add.move_from:
                pairs[add.path] = add.move_from
                if add.move_from in free_deletes:
                    free_deletes.remove(add.move_from)
        for add in adds:
            if add.path in pairs:
                continue
            if free_deletes:
                pairs[add.path] = free_deletes.pop(0)
        return pairs

    def _apply_change(self, index: int, commit: Commit, change: FileChange,
                      moves: Mapping[str, str]) -> None:
        action = change.action
        if action is ChangeAction.DELETE:
            self._close_path(change.path, index)
            return

        if action is ChangeAction.ADD:
            state = _FileState(index)
            lines = _apply_hunks([], change, commit.id, change.path)
            if not change.hunks:
                lines = [(commit.id, None)] * change.lines_added
            state.record(index, tuple(lines), commit.author)
            self._open_path(change.path, index, state)
            return

        if action is ChangeAction.MOVE_ADD:
            source = moves.get(change.path) or change.move_from
            state = self._state_at(source, index - 1) if source else None
            base = list(state.lines_at(index - 1) or ()) if state else []
            if state is None:
                state = _FileState(index)
            lines = _apply_hunks(base, change, commit.id, change.path)
            state.record(index, tuple(lines), commit.author)
            if source:
                self._close_path(source, index)
            self._open_path(change.path, index, state)
            return

        if action is ChangeAction.BRANCH:
            source = change.move_from
            copied: list[Line] = []
            if source:
                src_state = self._state_at(source, index - 1)
                if src_state is not None:
                    copied = list(src_state.lines_at(index - 1) or ())
            state = _FileState(index)
            lines = _apply_hunks(copied, change, commit.id, change.path)
            if not change.hunks and not copied:
                lines = [(commit.id, None)] * change.lines_added
            state.record(index, tuple(lines), commit.author)
            self._open_path(change.path, index, state)
            return

        # EDIT or INTEGRATE: modify in place.
        state = self._state_at(change.path, index - 1)
        if state is None:
            state = _FileState(index)
            self._open_path(change.path, index, state)
            base: list[Line] = []
        else:
            base = list(state.lines_at(index - 1) or ())
        lines = _apply_hunks(base, change, commit.id, change.path)
        state.record(index, tuple(lines), commit.author)

    def _open_path(self, path: str, index: int, state: _FileState) -> None:
        self._paths.setdefault(path, []).append((index, state))

    def _close_path(self, path: str, index: int) -> None:
        self._paths.setdefault(path, []).append((index, None))

    def _state_at(self, path: str, index: int) -> _FileState | None:
        timeline = self._paths.get(path)
        if not timeline:
            return None
        state: _FileState | None = None
        for at, entry in timeline:
            if at > index:
                break
            state = entry
        return state

    # -- queries -----------------------------------------------------------

    def index_of(self, commit_id: str) -> int:
        if commit_id not in self._index:
            raise UnknownCommit(f"commit {commit_id!r} is not in the repo model")
        return self._index[commit_id]

    def commit(self, commit_id: str) -> Commit:
        return self.commits[self.index_of(commit_id)]

    def blame(self, path: str, lines: Iterable[int], as_of: str) -> dict[int, str | None]:
        """Origin commit id per line number, at the state `as_of` left behind.

        Line numbers are 1-based into the file as of that commit. Origins are
        ``None`` for lines older than the ingested history window.
        """
        index = self.index_of(as_of)
        state = self._state_at(path, index)
        if state is None:
            raise FileUnknownAtCommit(f"{path!r} does not exist as of {as_of}",
                                      path=path, as_of=as_of)
        snapshot = state.lines_at(index)
        if snapshot is None:
            raise FileUnknownAtCommit(f"{path!r} has no content as of {as_of}",
                                      path=path, as_of=as_of)
        result: dict[int, str | None] = {}
        for line in lines:
            if not 1 <= line <= len(snapshot):
                raise FileUnknownAtCommit(
                    f"{path!r} has {len(snapshot)} lines as of {as_of}, not {line}",
                    path=path, as_of=as_of, line=line)
            result[line] = snapshot[line - 1][0]
        return result

    def file_content(self, path: str, as_of: str) -> str | None:
        """Full text as of a commit, or None when any line lacks text."""
        index = self.index_of(as_of)
        state = self._state_at(path, index)
        if state is None:
            return None
        snapshot = state.lines_at(index)
        if snapshot is None:
            return None
        texts = [text for _, text in snapshot]
        if any(t is None for t in texts):
            return None
        return "\n".join(texts)  # type: ignore[arg-type]

    def file_facts(self, path: str, as_of: str) -> dict | None:
        """Revision count, age anchor, authors and size for feature extraction."""
        index = self.index_of(as_of)
        state = self._state_at(path, index)
        if state is None:
            return None
        snapshot = state.lines_at(index)
        touches = [i for i in state.touch_indices if i <= index]
        if snapshot is None or not touches:
            return None
        authors = {a for a, i in zip(state.authors, state.touch_indices) if i <= index}
        previous_touch = touches[-2] if len(touches) >= 2 else None
        return {
            "revision": len(touches),
            "created_index": state.created_index,
            "created_at": self.commits[min(state.created_index, len(self.commits) - 1)].timestamp,
            "last_touch_index": touches[-1],
            "previous_touch_at": (self.commits[previous_touch].timestamp
                                  if previous_touch is not None else None),
            "authors": authors,
            "line_count": len(snapshot),
        }


def link_fixes(bugs: Iterable[BugReport], commits: Sequence[Commit]) -> tuple[list[FixLink], list[str]]:
    """Pair bugs with their fixing commits.

    A link exists when a commit message references the bug's issue key or the
    bug record names the commit. One bug may have several fix commits. Bugs
    with no link land in the returned skip list.
    """
    links: list[FixLink] = []
    unlinked: list[str] = []
    by_id = {c.id: c for c in commits}
    for bug in sorted(bugs, key=lambda b: b.id):
        found = []
        for commit in commits:
            if bug.id in commit.linked_issue_keys:
                if commit.timestamp.date() >= bug.opened_on:
                    found.append(FixLink(bug.id, commit.id, "explicit_key"))
        if bug.fixed_by_commit and bug.fixed_by_commit in by_id:
            commit = by_id[bug.fixed_by_commit]
            if (commit.timestamp.date() >= bug.opened_on
                    and not any(l.fix_commit_id == commit.id for l in found)):
                found.append(FixLink(bug.id, commit.id, "tracker_field"))
        if found:
            links.extend(found)
        else:
            unlinked.append(bug.id)
    return links, unlinked


def extract_modified_lines(fix: Commit) -> dict[str, set[int]]:
    """Pre-image line numbers the fix deleted or edited, per text file.

    Pure additions contribute nothing (there is no pre-image to blame) and
    binary files are skipped. Raises :class:`NoTextChanges` when the fix has
    no text-file hunks at all.
    """
    per_file: dict[str, set[int]] = {}
    saw_text_change = False
    for change in fix.changes:
        if change.storage_type is StorageType.BINARY:
            continue
        if not change.hunks:
            continue
        saw_text_change = True
        lines: set[int] = set()
        for hunk in change.hunks:
            for offset in range(hunk.old_lines):
                lines.add(hunk.start_line + offset)
        if lines:
            per_file[change.path] = lines
    if not saw_text_change:
        raise NoTextChanges(f"fix commit {fix.id} touches no text hunks")
    return per_file


def blame_trace(repo: RepoModel, path: str, lines: Iterable[int],
                as_of: str) -> dict[int, str | None]:
    """Candidate origin commit per line, as of the commit before the fix."""
    return repo.blame(path, lines, as_of)


def filter_candidates(candidates: Iterable[str], bug: BugReport,
                      repo: RepoModel, fix_commit_ids: frozenset[str],
                      suspect_partial_fixes: bool = False) -> tuple[set[str], set[str]]:
    """Rule out candidates that cannot have induced the bug.

    A candidate committed after the bug was opened is dropped (the code it
    wrote did not exist when the bug was reported). With
    ``suspect_partial_fixes``, candidates that are themselves fix commits for
    other bugs are parked in the suspects set instead of labeled inducing.
    """
    inducing: set[str] = set()
    suspects: set[str] = set()
    for candidate in candidates:
        if candidate is None:
            continue
        commit = repo.commit(candidate)
        if commit.timestamp.date() > bug.opened_on:
            continue
        if suspect_partial_fixes and candidate in fix_commit_ids:
            suspects.add(candidate)
            continue
        inducing.add(candidate)
    return inducing, suspects


def label_commits(repo: RepoModel, bugs: Iterable[BugReport],
                  suspect_partial_fixes: bool = False) -> LabelReport:
    """Run the full labeling chain over the repo. Deterministic.

    Every commit receives exactly one label; a label is true iff at least one
    evidence triple (bug, file, fix pre-image line range) traces to it.
    """
    bug_list = sorted(bugs, key=lambda b: b.id)
    links, unlinked = link_fixes(bug_list, repo.commits)
    fix_ids = frozenset(link.fix_commit_id for link in links)
    bugs_by_id = {b.id: b for b in bug_list}

    evidence: dict[str, list[Evidence]] = {}
    suspects: set[str] = set()
    for link in links:
        fix_index = repo.index_of(link.fix_commit_id)
        if fix_index == 0:
            continue  # nothing before the first commit to blame
        as_of = repo.commits[fix_index - 1].id
        fix = repo.commits[fix_index]
        try:
            modified = extract_modified_lines(fix)
        except NoTextChanges:
            continue
        bug = bugs_by_id[link.bug_id]
        for path in sorted(modified):
            try:
                origins = blame_trace(repo, path, sorted(modified[path]), as_of)
            except FileUnknownAtCommit:
                continue
            by_candidate: dict[str, list[int]] = {}
            inducing, parked = filter_candidates(
                {origin for origin in origins.values() if origin is not None},
                bug, repo, fix_ids, suspect_partial_fixes)
            suspects.update(parked)
            for line, origin in origins.items():
                if origin in inducing:
                    by_candidate.setdefault(origin, []).append(line)
            for candidate, lines in sorted(by_candidate.items()):
                for start, end in _ranges(sorted(lines)):
                    evidence.setdefault(candidate, []).append(
                        Evidence(bug.id, path, start, end))

    labels = []
    for commit in repo.commits:
        found = tuple(sorted(evidence.get(commit.id, ()),
                             key=lambda e: (e.bug_id, e.file, e.line_start)))
        labels.append(InducingLabel(commit.id, bool(found), found))
    return LabelReport(labels=tuple(labels), links=tuple(links),
                       unlinked_bugs=tuple(unlinked), suspects=tuple(sorted(suspects)))


def _ranges(ordered: Sequence[int]) -> list[tuple[int, int]]:
    """Group sorted line numbers into inclusive contiguous ranges."""
    out: list[tuple[int, int]] = []
    start = prev = None
    for line in ordered:
        if start is None:
            start = prev = line
        elif line == prev + 1:
            prev = line
        else:
            out.append((start, prev))
            start = prev = line
    if start is not None:
        out.append((start, prev))
    return out
