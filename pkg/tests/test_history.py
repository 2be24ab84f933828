from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchmerge.agents.base import ActionKind, AgentAction, AgentTurn, Role
from branchmerge.agents.context import (
    TEMPLATE_NAMES,
    CondensedHistory,
    PromptBook,
    condense_history,
    render,
    summarize_turn,
)
from branchmerge.depgraph import complete_unit
from branchmerge.history import StructuredArtifacts, UnresolvedError, condensation_due, snapshot

from conftest import graph_of


def turn(i: int) -> AgentTurn:
    doc = {"reasoning": f"step {i}", "assignments": []}
    return AgentTurn(Role.MANAGER, "manager", (), (AgentAction(ActionKind.EMIT_JSON, {"document": doc}),), 1)


def artifacts() -> StructuredArtifacts:
    g = graph_of("abc", [("a", "b")])
    g.assign("a")
    g.mark_completed("a")
    complete_unit(g, "a")
    return snapshot(g, [UnresolvedError("b", "test_b fails")])


def test_snapshot_is_deep_copy():
    g = graph_of("ab")
    art = snapshot(g)
    g.assign("a")
    g.mark_completed("a")
    complete_unit(g, "a")
    g.round = 3
    assert art.completed_tasks == ()
    assert '"completed":[]' in art.graph_snapshot and '"round":0' in art.graph_snapshot


def test_artifacts_consistency_checked():
    art = artifacts()
    with pytest.raises(ValueError):
        StructuredArtifacts(art.graph_snapshot, ("b",))


def test_artifacts_round_trip():
    art = artifacts()
    assert StructuredArtifacts.from_dict(art.to_dict()) == art
    assert art.completed_tasks == ("a",)


def test_condensation_due():
    assert not condensation_due(10, 10)
    assert condensation_due(11, 10)
    with pytest.raises(ValueError):
        condensation_due(3, 0)


def test_no_condensation_under_window():
    h = condense_history([turn(i) for i in range(3)], artifacts(), window=5)
    assert h.summary is None and len(h.turns) == 3


def test_condense_keeps_recent_window():
    h = condense_history([turn(i) for i in range(12)], artifacts(), window=4)
    assert len(h.turns) == 4
    assert h.summary.turns_summarized == 8
    assert h.summary.lines[0].startswith("#0 manager")
    assert "emit assignments,reasoning" in h.summary.lines[0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=1, max_size=8), st.integers(1, 6))
def test_artifacts_survive_repeated_condensation(batches, window):
    keep = artifacts()
    before = keep.to_json()
    h = CondensedHistory()
    total = 0
    for n in batches:
        for _ in range(n):
            h = h.append(turn(total))
            total += 1
        h = condense_history(h, keep, window)
        assert h.artifacts.to_json() == before
        assert len(h.turns) <= max(window, 0) or not condensation_due(len(h.turns), window)
        summarized = h.summary.turns_summarized if h.summary else 0
        assert summarized + len(h.turns) == total


def test_summary_message():
    h = condense_history([turn(i) for i in range(3)], artifacts(), window=1)
    msg = h.summary.to_message()
    assert msg["role"] == "user" and "(2)" in msg["content"]


def test_summarize_non_json_turn():
    t = AgentTurn(Role.ENGINEER, "engineer-1", (), (AgentAction(ActionKind.IDLE),), 2)
    assert summarize_turn(5, t) == "#5 engineer-1 (2 it): idle"


def test_render_leaves_unknown_placeholders():
    assert render("{a} and {b} and {}", {"a": "x"}) == "x and {b} and {}"


def test_bundled_templates_complete():
    book = PromptBook.bundled()
    assert set(book.templates) == set(TEMPLATE_NAMES)
    msgs = book.messages("manager", "delegate", {"max_agents": "3"})
    assert [m["role"] for m in msgs] == ["system", "user"]


def test_template_override(tmp_path):
    (tmp_path / "engineer_resolve.txt").write_text("fix {task_id}", encoding="utf-8")
    book = PromptBook.from_dir(tmp_path)
    assert book.messages("engineer", "resolve", {"task_id": "t1"})[1]["content"] == "fix t1"
    assert book.templates["manager_system"] == PromptBook.bundled().templates["manager_system"]
