"""Rule-based manager backend.

It makes the decisions a manager model would make from structured state alone:
each engineer works through its own major task group in priority order,
groups whose owner can no longer work are picked up by idle engineers, and
verification reports are approved exactly when they are clean.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from typing import Any

from branchmerge.agents.base import ActionKind, AgentAction, BackendReply, TurnRequest
from branchmerge.depgraph import DependencyGraph, ready_units


def _instruction(unit: Mapping[str, Any]) -> str:
    funcs = unit["functions"]
    what = ", ".join(funcs) if funcs else "every stub"
    return f"Fill in {what} in {unit['file_path']}. Keep edits inside this file and leave package initializers alone."


def select_assignments(
    graph: DependencyGraph,
    groups: Iterable[Mapping[str, Any]],
    eligible: Iterable[str],
    busy: Iterable[str] = (),
    in_flight: Iterable[str] = (),
) -> list[tuple[str, str]]:
    """(engineer_id, unit_id) pairs, at most one per eligible engineer."""
    owner: dict[str, str | None] = {}
    for g in groups:
        for u in g["unit_ids"]:
            owner[u] = g.get("engineer")
    eligible = sorted(eligible)
    working = set(eligible) | set(busy)
    blocked = set(in_flight)
    ready = [u for u in ready_units(graph) if u not in blocked]
    taken: set[str] = set()
    out: list[tuple[str, str]] = []
    for e in eligible:
        own = [u for u in ready if owner.get(u) == e and u not in taken]
        orphans = [u for u in ready if owner.get(u) not in working and u not in taken]
        pick = (own or orphans or [None])[0]
        if pick is not None:
            taken.add(pick)
            out.append((e, pick))
    return out


def _units_by_id(graph_doc: Mapping[str, Any]) -> dict[str, dict]:
    return {u["unit_id"]: u for u in graph_doc["units"]}


def _assignment(engineer: str, unit: Mapping[str, Any]) -> dict:
    return {
        "engineer_id": engineer,
        "task_id": unit["unit_id"],
        "file_path": unit["file_path"],
        "functions_to_implement": list(unit["functions"]),
        "instruction": _instruction(unit),
        "complexity": unit["complexity"],
    }


class PlannerBackend:
    """Manager backend that never calls a model. Costs nothing, one iteration per turn."""

    async def respond(self, request: TurnRequest) -> BackendReply:
        doc = self.decide(request.kind, request.state)
        if doc is None:
            return BackendReply(actions=(AgentAction(ActionKind.IDLE),))
        return BackendReply(actions=(AgentAction(ActionKind.EMIT_JSON, {"document": doc}),))

    def decide(self, kind: str, state: Mapping[str, Any]) -> dict | None:
        if kind in ("delegate", "assign"):
            return self._assign(kind, state)
        if kind == "review":
            report = state.get("report") or {}
            clean = report.get("failed", 1) == 0 and report.get("errored", 1) == 0
            return {
                "review": {
                    "decision": "approve" if clean else "reject",
                    "reason": "tests pass" if clean else "verification reported failures",
                }
            }
        if kind == "final_review":
            remaining = state.get("remaining_units", [])
            return {
                "final_review": {
                    "report": f"{len(remaining)} unit(s) left unintegrated",
                    "request_salvage": bool(state.get("salvage_candidates")),
                }
            }
        return None

    def _assign(self, kind: str, state: Mapping[str, Any]) -> dict:
        graph_doc = state["graph"]
        graph = DependencyGraph.from_dict(graph_doc)
        graph.coverage = dict(state.get("coverage", {}))
        units = _units_by_id(graph_doc)
        pairs = select_assignments(
            graph, state.get("groups", []), state.get("eligible", []), state.get("busy", []), state.get("in_flight", [])
        )
        tasks = [_assignment(e, units[u]) for e, u in pairs]
        if kind == "assign":
            reason = "next ready unit per idle engineer" if tasks else "no ready unit; engineers stay idle"
            return {"assign_task": {"reasoning": reason, "assignments": tasks}}
        chosen = {u for _, u in pairs}
        remaining = [
            {
                "task_id": uid,
                "file_path": u["file_path"],
                "functions_to_implement": list(u["functions"]),
                "complexity": u["complexity"],
                "depends_on": graph.predecessors(uid),
            }
            for uid, u in sorted(units.items())
            if uid not in chosen and uid not in graph.completed
        ]
        return {
            "delegation_plan": {
                "first_round": {
                    "num_agents": max(1, len(state.get("groups", [])), len(tasks)),
                    "reasoning": "one major task group per engineer, highest-priority ready unit first",
                    "tasks": tasks,
                },
                "remaining_tasks": remaining,
            }
        }
