"""Structured manager state that must survive history condensation untouched."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

from branchmerge import _json
from branchmerge.depgraph import DependencyGraph


@dataclass(frozen=True)
class UnresolvedError:
    task_id: str
    summary: str


@dataclass(frozen=True)
class StructuredArtifacts:
    graph_snapshot: str
    completed_tasks: tuple[str, ...] = ()
    unresolved_errors: tuple[UnresolvedError, ...] = ()

    def __post_init__(self) -> None:
        graph = DependencyGraph.from_json(self.graph_snapshot)
        if sorted(graph.completed) != sorted(self.completed_tasks):
            raise ValueError("completed_tasks disagrees with the graph snapshot")

    def to_dict(self) -> dict:
        return {
            "graph_snapshot": self.graph_snapshot,
            "completed_tasks": list(self.completed_tasks),
            "unresolved_errors": [{"task_id": e.task_id, "summary": e.summary} for e in self.unresolved_errors],
        }

    def to_json(self) -> bytes:
        return _json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> StructuredArtifacts:
        return cls(
            graph_snapshot=d["graph_snapshot"],
            completed_tasks=tuple(d["completed_tasks"]),
            unresolved_errors=tuple(UnresolvedError(**e) for e in d["unresolved_errors"]),
        )


def snapshot(graph: DependencyGraph, errors: Iterable[UnresolvedError] = ()) -> StructuredArtifacts:
    """Deep, immutable copy of the state the manager must never forget."""
    return StructuredArtifacts(
        graph_snapshot=graph.to_json().decode("utf-8"),
        completed_tasks=tuple(sorted(graph.completed)),
        unresolved_errors=tuple(errors),
    )


def condensation_due(turn_count: int, window: int) -> bool:
    if window < 1:
        raise ValueError("window must be >= 1")
    return turn_count > window
