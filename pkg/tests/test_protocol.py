from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchmerge.depgraph import Complexity
from branchmerge.errors import MalformedJson, OverlappingFunctions, SchemaViolation
from branchmerge.protocol import (
    Assignment,
    AssignTask,
    CompletionSignal,
    DelegationPlan,
    Outcome,
    RemainingTask,
    TaskCategory,
    check_disjoint,
    decode_assign_task,
    parse,
    serialize,
    shared_write_regions,
)

from corpus import load_cases, outcome

CASES = load_cases()


def test_corpus_size():
    assert sum(c.expect == "valid" for c in CASES) >= 20
    assert sum(c.expect != "valid" for c in CASES) >= 20
    names = {c.name for c in CASES}
    assert "valid/assign_empty_assignments.json" in names
    assert {c.expect for c in CASES} >= {"OverlappingFunctions", "RestrictedFileAssignment"}


@pytest.mark.parametrize("case", CASES, ids=[c.name for c in CASES])
def test_corpus_document(case):
    got, field = outcome(case)
    assert got == case.expect
    if case.field is not None:
        assert field == case.field


def test_empty_assignments_is_a_noop():
    msg = decode_assign_task(b'{"assign_task": {"reasoning": "wait", "assignments": []}}')
    assert msg.assignments == () and msg.list_key == "assignments"


def test_check_disjoint_whole_file_claims():
    check_disjoint([("a.py", ["x"]), ("a.py", ["y"]), ("b.py", [])])
    with pytest.raises(OverlappingFunctions) as exc:
        check_disjoint([("a.py", []), ("a.py", ["y"])])
    assert exc.value.file == "a.py"


def test_shared_write_regions():
    a = [Assignment("e1", "t1", "x.py", ("f",)), Assignment("e2", "t2", "x.py", ("g",)),
         Assignment("e3", "t3", "y.py")]
    assert shared_write_regions(a) == {"x.py": ["e1", "e2"]}


def test_completion_requires_commit():
    with pytest.raises(ValueError):
        CompletionSignal("e1", "t", Outcome.COMMITTED)


def test_category_wire_labels():
    assert TaskCategory.from_wire("Results Analysis") is TaskCategory.RESULTS_ANALYSIS
    assert TaskCategory.CODE_DEVELOPMENT.wire == "Code Development"


def test_malformed_bytes():
    with pytest.raises(MalformedJson):
        parse(b"\xff", CompletionSignal)


def test_serialize_field_names_exact():
    plan = DelegationPlan(1, "r", (Assignment("engineer-1", "a.py", "a.py", ("f",), "do it"),),
                          (RemainingTask("b.py", "b.py", ("g",), Complexity.SIMPLE, ("a.py",)),))
    doc = json.loads(serialize(plan))
    first = doc["delegation_plan"]["first_round"]
    assert list(first) == ["num_agents", "reasoning", "tasks"]
    assert list(first["tasks"][0]) == ["engineer_id", "task_id", "file_path", "functions_to_implement",
                                       "instruction", "complexity"]
    assert list(doc["delegation_plan"]["remaining_tasks"][0]) == [
        "task_id", "file_path", "functions_to_implement", "complexity", "depends_on"]


names = st.text("abcdefgh_", min_size=1, max_size=6)
paths = st.sampled_from(["a.py", "pkg/b.py", "c/d.py"])
code_assignments = st.builds(
    Assignment,
    engineer_id=st.sampled_from(["engineer-1", "engineer-2"]),
    task_id=names,
    file_path=paths,
    functions_to_implement=st.lists(names, unique=True, max_size=3).map(tuple),
    instruction=st.text(max_size=20),
    complexity=st.sampled_from(list(Complexity)),
)
open_assignments = st.builds(
    Assignment,
    engineer_id=st.sampled_from(["engineer-1", "engineer-2"]),
    task_id=names,
    instruction=st.text(max_size=20),
    complexity=st.sampled_from(list(Complexity)),
    task_category=st.sampled_from(list(TaskCategory)),
    task_node_id=st.one_of(st.none(), names),
    requirements=st.text(max_size=20),
)
remaining_tasks = st.builds(
    RemainingTask,
    task_id=names,
    file_path=paths,
    functions=st.lists(names, unique=True, max_size=3).map(tuple),
    complexity=st.sampled_from(list(Complexity)),
    depends_on=st.lists(names, unique=True, max_size=2).map(tuple),
)


@settings(max_examples=150, deadline=None)
@given(st.one_of(
    code_assignments,
    open_assignments,
    st.builds(AssignTask, reasoning=st.text(max_size=10),
              assignments=st.lists(code_assignments, max_size=1).map(tuple)),
    st.builds(DelegationPlan, num_agents=st.integers(1, 4), reasoning=st.text(max_size=10),
              first_round=st.lists(st.one_of(code_assignments, open_assignments), max_size=2).map(tuple),
              remaining_tasks=st.lists(remaining_tasks, max_size=2).map(tuple)),
    st.builds(CompletionSignal, engineer_id=names, task_id=names, outcome=st.just(Outcome.COMMITTED),
              commit_id=names, verification=st.one_of(st.none(), st.just({"passed": 1}))),
))
def test_round_trip(message):
    raw = serialize(message)
    back = parse(raw, type(message))
    assert serialize(back) == raw
    assert back == message


def test_unknown_top_level_field_rejected():
    with pytest.raises(SchemaViolation) as exc:
        decode_assign_task(b'{"assign_task": {"reasoning": "", "assignments": []}, "extra": 1}')
    assert exc.value.field == "extra"
