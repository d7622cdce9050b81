#!/usr/bin/env python3
"""Regenerate the bundled demo fixture under fixtures/demo/.

Deterministic: same seed, same bytes. The fixture is a small but complete
game-QA snapshot (test catalog, run history, bugs, commits with line-level
diffs, telemetry) plus pipeline configs wired for both the test-selection
and the defect-prevention stages.
"""

from __future__ import annotations

import json
import random
import sys
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from riskpilot import model, risk  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "fixtures" / "demo"

TODAY = date(2025, 9, 30)
START = datetime(2025, 6, 1, 9, 0, tzinfo=timezone.utc)

AREAS = ("frontend", "netcode", "physics", "franchise", "audio")
AUTHORS = ("ann", "bob", "cam", "dee")


def iso(ts: datetime) -> str:
    return ts.isoformat().replace("+00:00", "Z")


def code_lines(tag: str, n: int) -> list[str]:
    lines = [f"int {tag}_state = 0;"]
    for j in range(1, n):
        if j % 4 == 1:
            lines.append(f"void {tag}_step{j}(int a, int b) {{")
        elif j % 4 == 2:
            lines.append(f"  if (a > b) {{ {tag}_state += a; }}")
        elif j % 4 == 3:
            lines.append(f"  // tick {j}")
        else:
            lines.append("}")
    return lines[:n]


def change(path, action, hunks, *, is_code=True, storage="text", move_from=None,
           size=140):
    added = deleted = edited = 0
    for h in hunks:
        e = min(h["old_lines"], h["new_lines"])
        edited += e
        deleted += h["old_lines"] - e
        added += h["new_lines"] - e
    doc = {"path": path, "action": action, "storage_type": storage,
           "lines_added": added, "lines_deleted": deleted, "lines_edited": edited,
           "hunks": hunks, "file_size": size, "is_code": is_code}
    if move_from:
        doc["move_from"] = move_from
    return doc


def build_records(rng: random.Random) -> list[dict]:
    records: list[dict] = []

    # telemetry: one window per area
    popularity = {"frontend": 0.75, "netcode": 0.62, "physics": 0.48,
                  "franchise": 0.55, "audio": 0.2}
    for area in AREAS:
        records.append({
            "type": "telemetry", "area": area,
            "avg_distribution": popularity[area],
            "avg_stickiness": round(min(popularity[area] + 0.1, 0.95), 2),
            "window_start": "2025-09-01", "window_end": "2025-09-28",
        })

    # test catalog
    tests: list[tuple[str, str]] = []
    per_area = {"frontend": 5, "netcode": 5, "physics": 6, "franchise": 5, "audio": 4}
    for area in AREAS:
        for i in range(per_area[area]):
            test_id = f"{area}_case_{i:02d}"
            tests.append((test_id, area))
            records.append({
                "type": "test_case", "id": test_id,
                "title": f"{area} scenario {i}", "area": area,
                "automated": rng.random() < 0.6,
                "created_on": (TODAY - timedelta(days=rng.randint(40, 120))).isoformat(),
            })

    # commits: create/fix chains per area plus churn
    commits: list[dict] = []
    shadow: dict[str, int] = {}
    bug_no = 0
    bugs: list[dict] = []
    t = START
    chain_files: list[tuple[str, str]] = []  # (path, creator id)
    commit_no = 0

    def next_commit_id() -> str:
        nonlocal commit_no
        commit_no += 1
        return f"CL{commit_no:04d}"

    fail_rate = {"frontend": 0.12, "netcode": 0.3, "physics": 0.35,
                 "franchise": 0.18, "audio": 0.02}

    for round_no in range(6):
        for area in AREAS:
            # creation commit
            cid = next_commit_id()
            path = f"game/{area}/mod{round_no}.c"
            n = rng.randint(6, 14)
            commits.append({
                "type": "commit", "id": cid, "author": rng.choice(AUTHORS),
                "timestamp": iso(t), "message": f"implement {area} module {round_no}",
                "changes": [change(path, "add", [{
                    "start_line": 1, "old_lines": 0, "new_lines": n,
                    "added_text": code_lines(f"{area}{round_no}", n)}])],
            })
            shadow[path] = n
            chain_files.append((path, cid))
            t += timedelta(hours=rng.randint(5, 20))

        # churn commit touching two files
        if len(shadow) >= 2:
            cid = next_commit_id()
            picks = rng.sample(sorted(shadow), 2)
            changes = []
            for path in picks:
                line = rng.randint(1, max(shadow[path] - 1, 1))
                changes.append(change(path, "edit", [{
                    "start_line": line, "old_lines": 1, "new_lines": 1,
                    "added_text": [f"  {path.split('/')[1]}_tune = {rng.randint(1, 99)};"]}]))
            commits.append({
                "type": "commit", "id": cid, "author": rng.choice(AUTHORS),
                "timestamp": iso(t), "message": f"tuning pass {round_no}",
                "changes": changes,
            })
            t += timedelta(hours=rng.randint(4, 16))

        # three fixes per round; alternate between the oldest and the newest
        # unfixed files so inducing labels spread across the whole history
        for _ in range(3):
            if not chain_files:
                break
            take_oldest = bug_no % 2 == 0
            path, creator = chain_files.pop(0 if take_oldest else -1)
            if path not in shadow:
                continue
            area = path.split("/")[1]
            bug_no += 1
            key = f"{area[:3].upper()}-{bug_no:03d}"
            opened = t.date() if not take_oldest else (
                t - timedelta(days=rng.randint(0, 2))).date()
            fixer = next_commit_id()
            line = rng.randint(1, max(shadow[path] - 2, 1))
            bugs.append({
                "type": "bug", "id": key, "severity": rng.randint(2, 5),
                "opened_on": opened.isoformat(), "status": "addressed",
                "area": area, "fixed_by_commit": fixer,
            })
            commits.append({
                "type": "commit", "id": fixer, "author": rng.choice(AUTHORS),
                "timestamp": iso(t), "message": f"Fix {key}: {area} fault",
                "changes": [change(path, "edit", [{
                    "start_line": line, "old_lines": 2, "new_lines": 2,
                    "added_text": [f"  if (guard_{bug_no}) {{ return; }}",
                                   f"  {area}_patch = {bug_no};"]}])],
            })
            t += timedelta(hours=rng.randint(6, 24))

    # a rename plus a binary asset drop for variety
    cid = next_commit_id()
    old = sorted(shadow)[0]
    new = old.replace(".c", "_v2.c")
    shadow[new] = shadow.pop(old)
    commits.append({
        "type": "commit", "id": cid, "author": "dee", "timestamp": iso(t),
        "message": "restructure module layout",
        "changes": [change(new, "move_add", [], move_from=old),
                    change(old, "move_delete", []),
                    change("assets/ui/sheet.bin", "add", [], is_code=False,
                           storage="binary", size=40960)],
    })

    # open bugs without fixes
    for area in ("physics", "netcode", "frontend"):
        bug_no += 1
        bugs.append({
            "type": "bug", "id": f"{area[:3].upper()}-{bug_no:03d}",
            "severity": rng.randint(3, 5),
            "opened_on": (TODAY - timedelta(days=rng.randint(2, 20))).isoformat(),
            "status": "open", "area": area,
        })

    records.extend(commits)
    records.extend(bugs)
    open_bug_ids = {b["id"]: b["area"] for b in bugs}

    # run history
    for test_id, area in tests:
        if test_id == "audio_case_00":
            continue  # handled below: long streak of passes
        for _ in range(rng.randint(2, 9)):
            tested = TODAY - timedelta(days=rng.randint(0, 80))
            failed = rng.random() < fail_rate[area]
            status = "failed" if failed else ("blocked" if rng.random() < 0.05 else "passed")
            found = []
            if failed and rng.random() < 0.5:
                candidates = [b for b, a in open_bug_ids.items() if a == area]
                if candidates:
                    found = [rng.choice(candidates)]
            records.append({
                "type": "test_run", "test_id": test_id, "status": status,
                "tested_on": tested.isoformat(),
                "duration_hours": round(rng.uniform(0.3, 2.5), 2),
                "found_bug_ids": found,
            })

    # audio_case_00: fifty consecutive passes, a retirement candidate
    for i in range(50):
        records.append({
            "type": "test_run", "test_id": "audio_case_00", "status": "passed",
            "tested_on": (TODAY - timedelta(days=100 - 2 * i)).isoformat(),
            "duration_hours": 0.4, "found_bug_ids": [],
        })
    # physics_case_00: a bug found in its most recent run, never stale
    records.append({
        "type": "test_run", "test_id": "physics_case_00", "status": "failed",
        "tested_on": (TODAY - timedelta(days=1)).isoformat(),
        "duration_hours": 1.1,
        "found_bug_ids": [next(b for b, a in open_bug_ids.items() if a == "physics")],
    })
    return records


def criteria_docs() -> list[dict]:
    docs = [risk.spec_to_doc(s) for s in risk.default_criteria()]
    docs.append({
        "name": "issue_pressure", "kind": "probability", "weight": 0.6,
        "normalization": {"kind": "affine", "src_lo": 0.0, "src_hi": 60.0},
        "source": "tree:issue_pressure",
    })
    return docs


ISSUE_PRESSURE_TREE = {
    "name": "issue_pressure",
    "inputs": ["open_defects", "severity_max"],
    "root": {"kind": "binary", "op": "*",
             "left": {"kind": "input", "name": "open_defects"},
             "right": {"kind": "binary", "op": "+",
                       "left": {"kind": "const", "value": 1},
                       "right": {"kind": "weighted",
                                 "child": {"kind": "input", "name": "severity_max"},
                                 "weight": 1.0,
                                 "activation": {"clamp": [0.0, 5.0]}}}},
}

PIPELINE = {
    "name": "demo",
    "sources": [{"id": "records", "adapter": "ndjson", "path": "records.ndjson"}],
    "transforms": [{"file": "trees/issue_pressure.json"}],
    "stages": [
        {"id": "selection", "kind": "rbt", "criteria_file": "criteria.json",
         "today": "2025-09-30", "budget": {"kind": "count", "value": 8},
         "decay_window_days": 30,
         "stale": {"min_time_factor": 0.05, "min_consecutive_passes": 30,
                   "max_days_unexecuted": 180}},
        {"id": "defect", "kind": "defect_prevention",
         "train": {"n_trees": 25, "max_depth": 3, "learning_rate": 0.1,
                   "min_samples_leaf": 4, "seed": 7},
         "threshold": 0.5, "test_fraction": 0.3},
    ],
    "outputs": [
        {"kind": "report", "template": "rbt_summary"},
        {"kind": "report", "template": "defect_summary"},
    ],
}


def main() -> None:
    rng = random.Random(20250930)
    records = build_records(rng)
    # shake out invalid documents before writing anything
    for doc in records:
        model.validate_record(doc, today=TODAY)

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "trees").mkdir(exist_ok=True)
    with open(OUT / "records.ndjson", "w", encoding="utf-8") as handle:
        for doc in records:
            handle.write(json.dumps(doc, sort_keys=True) + "\n")
    (OUT / "criteria.json").write_text(
        json.dumps(criteria_docs(), indent=1) + "\n", encoding="utf-8")
    (OUT / "trees" / "issue_pressure.json").write_text(
        json.dumps(ISSUE_PRESSURE_TREE, indent=1) + "\n", encoding="utf-8")
    (OUT / "pipeline.json").write_text(
        json.dumps(PIPELINE, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} records to {OUT}")


if __name__ == "__main__":
    main()
