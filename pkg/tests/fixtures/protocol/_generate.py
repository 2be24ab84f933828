"""Regenerate the labelled protocol corpus: ``python tests/fixtures/protocol/_generate.py``.

Every document lands in ``valid/`` or ``invalid/``; ``labels.json`` records the
message kind, the expected outcome (``"valid"`` or an error class name) and,
for schema errors, the offending field. The checked-in files are the source of
truth for the tests; this script only exists to keep them reviewable.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

HERE = Path(__file__).parent

CONTEXT = {
    "max_agents": 3,
    "engineer_ids": ["engineer-1", "engineer-2", "engineer-3"],
    "restricted": ["__init__.py", "setup.py"],
    "graph_files": ["pkg/a.py", "pkg/b.py", "pkg/c.py"],
}


def code_task(eid="engineer-1", tid="pkg/a.py", path="pkg/a.py", fns=("f",), cx="simple"):
    return {
        "engineer_id": eid,
        "task_id": tid,
        "file_path": path,
        "functions_to_implement": list(fns),
        "instruction": f"Implement {', '.join(fns) or 'everything'} in {path}.",
        "complexity": cx,
    }


def open_task(eid="engineer-1", tid="t-1", cat="Code Development", node=None, cx="medium"):
    d = {
        "engineer_id": eid,
        "task_id": tid,
        "requirements": "Reproduce the main results table.",
        "task_category": cat,
        "estimated_complexity": cx,
        "instruction": "Write the training loop and log metrics.",
    }
    if node is not None:
        d["task_node_id"] = node
    return d


def remaining(tid="pkg/c.py", path="pkg/c.py", fns=("h",), deps=("pkg/a.py",), cx="simple"):
    return {"task_id": tid, "file_path": path, "functions_to_implement": list(fns), "complexity": cx,
            "depends_on": list(deps)}


def open_remaining(tid="t-9", deps=("t-1",)):
    return {"task_id": tid, "requirements": "Plot the ablation.", "task_category": "Results Analysis",
            "estimated_complexity": "simple", "depends_on": list(deps)}


def plan(tasks, rest=(), n=None, reasoning="Start with the leaves of the import graph."):
    return {"delegation_plan": {
        "first_round": {"num_agents": len(tasks) if n is None else n, "reasoning": reasoning, "tasks": list(tasks)},
        "remaining_tasks": list(rest),
    }}


def assign(items, key="assignments", reasoning="Next ready units."):
    return {"assign_task": {"reasoning": reasoning, key: list(items)}}


def completion(outcome="committed", commit="3f2a9c1", ver=None):
    return {"engineer_id": "engineer-2", "task_id": "pkg/b.py", "commit_id": commit, "verification": ver,
            "outcome": outcome}


VALID = {
    "plan_basic": ("delegation_plan", plan([code_task(), code_task("engineer-2", "pkg/b.py", "pkg/b.py", ["g"])],
                                           [remaining()])),
    "plan_single_agent": ("delegation_plan", plan([code_task()])),
    "plan_no_remaining": ("delegation_plan", plan([code_task(), code_task("engineer-3", "pkg/c.py", "pkg/c.py", ["h"])])),
    "plan_empty_first_round": ("delegation_plan", plan([], [remaining(deps=())], n=1)),
    "plan_open_ended": ("delegation_plan", plan([open_task()], [open_remaining()])),
    "plan_open_with_node_id": ("delegation_plan", plan([open_task(node="node-7")])),
    "plan_split_one_file": ("delegation_plan", plan([code_task(fns=["f"]), code_task("engineer-2", "pkg/a.py#2",
                                                                                      "pkg/a.py", ["f2"])])),
    "plan_depends_on_task_id": ("delegation_plan", plan([code_task(tid="A")], [remaining(tid="C", deps=["A"])])),
    "plan_whole_file": ("delegation_plan", plan([code_task(fns=[])])),
    "plan_complex_unit": ("delegation_plan", plan([code_task(cx="complex")], n=3)),
    "plan_unicode_reasoning": ("delegation_plan", plan([code_task()], reasoning="Ordre: a → b → c, d'abord.")),
    "assign_empty_assignments": ("assign_task", assign([], reasoning="Nothing is ready yet.")),
    "assign_one": ("assign_task", assign([code_task("engineer-2", "pkg/b.py", "pkg/b.py", ["g"])])),
    "assign_two_files": ("assign_task", assign([code_task(), code_task("engineer-3", "pkg/c.py", "pkg/c.py", ["h"])])),
    "assign_same_file_disjoint": ("assign_task", assign([code_task(fns=["f"]), code_task("engineer-2", "pkg/a.py#2",
                                                                                        "pkg/a.py", ["f2", "f3"])])),
    "assign_open_tasks_key": ("assign_task", assign([open_task()], key="tasks")),
    "assign_open_experiment": ("assign_task", assign([open_task(cat="Experiment Running")], key="tasks")),
    "assign_open_analysis": ("assign_task", assign([open_task(cat="Results Analysis", cx="simple")], key="tasks")),
    "assign_open_other": ("assign_task", assign([open_task(cat="Other", node="n-2")], key="tasks")),
    "assign_fix_prefix": ("assign_task", assign([code_task(tid="fix-pkg/a.py")])),
    "completion_committed": ("completion", completion()),
    "completion_partial": ("completion", completion("partial", None)),
    "completion_failed_with_report": ("completion", completion("failed", None, {"passed": 1, "failed": 2})),
    "assignment_code": ("assignment", code_task("engineer-3", "pkg/c.py", "pkg/c.py", ["h"])),
    "assignment_open": ("assignment", open_task(node=None)),
}


def _mutate(doc, fn):
    d = copy.deepcopy(doc)
    fn(d)
    return d


BASE_PLAN = plan([code_task(), code_task("engineer-2", "pkg/b.py", "pkg/b.py", ["g"])], [remaining()])
FIRST = lambda d: d["delegation_plan"]["first_round"]  # noqa: E731

INVALID = {
    "malformed_truncated": ("delegation_plan", '{"delegation_plan": {"first_round": {"num_agents": 2,', "MalformedJson", None),
    "malformed_trailing_comma": ("assign_task", '{"assign_task": {"reasoning": "x", "assignments": [],}}',
                                 "MalformedJson", None),
    "malformed_not_utf8": ("completion", b'{"engineer_id": "\xff\xfe"}', "MalformedJson", None),
    "not_an_object": ("delegation_plan", [1, 2, 3], "SchemaViolation", ""),
    "plan_missing_first_round": ("delegation_plan", {"delegation_plan": {"remaining_tasks": []}},
                                 "SchemaViolation", "first_round"),
    "plan_num_agents_zero": ("delegation_plan", _mutate(BASE_PLAN, lambda d: FIRST(d).update(num_agents=0)),
                             "SchemaViolation", "num_agents"),
    "plan_num_agents_string": ("delegation_plan", _mutate(BASE_PLAN, lambda d: FIRST(d).update(num_agents="2")),
                               "SchemaViolation", "num_agents"),
    "plan_num_agents_exceeds": ("delegation_plan", _mutate(BASE_PLAN, lambda d: FIRST(d).update(num_agents=4)),
                                "SchemaViolation", "num_agents"),
    "plan_more_tasks_than_agents": ("delegation_plan", _mutate(BASE_PLAN, lambda d: FIRST(d).update(num_agents=1)),
                                    "SchemaViolation", "tasks"),
    "plan_duplicate_engineer": ("delegation_plan", plan([code_task(), code_task("engineer-1", "pkg/b.py", "pkg/b.py",
                                                                                 ["g"])]),
                                "SchemaViolation", "engineer_id"),
    "plan_duplicate_task_ids": ("delegation_plan", plan([code_task()], [remaining(tid="pkg/a.py")]),
                                "SchemaViolation", "task_id"),
    "plan_overlapping_functions": ("delegation_plan", plan([code_task(fns=["f", "g"]),
                                                            code_task("engineer-2", "pkg/a.py#2", "pkg/a.py", ["g"])]),
                                   "OverlappingFunctions", None),
    "plan_whole_file_overlap": ("delegation_plan", plan([code_task()], [remaining("x", "pkg/a.py", [], [])]),
                                "OverlappingFunctions", None),
    "plan_restricted_init": ("delegation_plan", plan([code_task(path="pkg/__init__.py", tid="init")]),
                             "RestrictedFileAssignment", None),
    "plan_remaining_restricted": ("delegation_plan", plan([code_task()], [remaining("s", "setup.py", ["main"], [])]),
                                  "RestrictedFileAssignment", None),
    "plan_unknown_engineer": ("delegation_plan", plan([code_task("engineer-9")]), "UnknownEngineer", None),
    "plan_unknown_file": ("delegation_plan", plan([code_task(path="pkg/zzz.py", tid="z")]), "UnknownFile", "file_path"),
    "plan_bad_complexity": ("delegation_plan", plan([code_task(cx="hard")]), "SchemaViolation", "complexity"),
    "plan_unknown_depends_on": ("delegation_plan", plan([code_task()], [remaining(deps=["nowhere"])]),
                                "SchemaViolation", "depends_on"),
    "plan_extra_field": ("delegation_plan", _mutate(BASE_PLAN, lambda d: FIRST(d).update(priority=1)),
                         "SchemaViolation", "first_round.priority"),
    "assign_overlapping_functions": ("assign_task", assign([code_task(fns=["f"]),
                                                           code_task("engineer-2", "pkg/a.py#2", "pkg/a.py", ["f"])]),
                                     "OverlappingFunctions", None),
    "assign_restricted": ("assign_task", assign([code_task(path="setup.py", tid="setup")]),
                          "RestrictedFileAssignment", None),
    "assign_not_a_list": ("assign_task", {"assign_task": {"reasoning": "x", "assignments": {}}},
                          "SchemaViolation", "assignments"),
    "assign_missing_reasoning": ("assign_task", {"assign_task": {"assignments": []}}, "SchemaViolation", "reasoning"),
    "assign_bad_category": ("assign_task", assign([open_task(cat="Coding")], key="tasks"),
                            "SchemaViolation", "task_category"),
    "assign_duplicate_task_ids": ("assign_task", assign([code_task(), code_task("engineer-2", "pkg/a.py", "pkg/b.py",
                                                                                ["g"])]),
                                  "SchemaViolation", "task_id"),
    "assign_empty_engineer_id": ("assign_task", assign([code_task(eid="  ")]), "SchemaViolation", "engineer_id"),
    "completion_committed_without_commit": ("completion", completion("committed", None), "SchemaViolation", "commit_id"),
    "completion_bad_outcome": ("completion", completion("merged"), "SchemaViolation", "outcome"),
    "completion_verification_list": ("completion", completion(ver=[1]), "SchemaViolation", "verification"),
    "assignment_functions_not_list": ("assignment", {**code_task(), "functions_to_implement": "f"},
                                      "SchemaViolation", "functions_to_implement"),
    "assignment_duplicate_functions": ("assignment", code_task(fns=["f", "f"]),
                                       "SchemaViolation", "functions_to_implement"),
}


def _write(path: Path, doc) -> None:
    if isinstance(doc, bytes):
        path.write_bytes(doc)
    elif isinstance(doc, str):
        path.write_text(doc, encoding="utf-8")
    else:
        path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def main() -> None:
    labels: dict[str, dict] = {}
    for sub in ("valid", "invalid"):
        (HERE / sub).mkdir(exist_ok=True)
        for old in (HERE / sub).glob("*.json"):
            old.unlink()
    for name, (kind, doc) in VALID.items():
        _write(HERE / "valid" / f"{name}.json", doc)
        labels[f"valid/{name}.json"] = {"kind": kind, "expect": "valid"}
    for name, (kind, doc, error, field) in INVALID.items():
        _write(HERE / "invalid" / f"{name}.json", doc)
        label = {"kind": kind, "expect": error}
        if field is not None:
            label["field"] = field
        labels[f"invalid/{name}.json"] = label
    (HERE / "labels.json").write_text(
        json.dumps({"context": CONTEXT, "documents": labels}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


if __name__ == "__main__":
    main()
