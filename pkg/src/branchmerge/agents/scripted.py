"""Deterministic trace-replay backend.

A trace is a list of steps. Each step has a ``when`` trigger (a subset of
agent, kind, status, task_id, last_event, attempt) and the reply to give. On
every request the first unconsumed step whose trigger matches is replayed and
consumed; steps marked ``repeat`` stay available. With no match the backend
defers to its fallback, or idles.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from branchmerge.agents.base import (
    TRIGGER_KEYS,
    ActionKind,
    AgentAction,
    Backend,
    BackendReply,
    TurnRequest,
    actions_from_list,
)
from branchmerge.errors import ScenarioError

_WHEN_KEYS = frozenset({"agent", "kind", *TRIGGER_KEYS})
_STEP_KEYS = frozenset({"when", "actions", "emit", "text", "cost", "iterations", "repeat"})


@dataclass(frozen=True)
class TraceStep:
    when: Mapping[str, Any]
    actions: tuple[AgentAction, ...] | None = None
    text: str | None = None
    cost: float = 0.0
    iterations: int = 1
    repeat: bool = False

    def matches(self, fields: Mapping[str, Any]) -> bool:
        return all(fields.get(k) == v for k, v in self.when.items())

    def reply(self) -> BackendReply:
        return BackendReply(actions=self.actions, text=self.text, cost=self.cost, iterations=self.iterations)


@dataclass(frozen=True)
class ScriptedTrace:
    steps: tuple[TraceStep, ...] = ()
    label: str = ""

    @classmethod
    def from_dict(cls, doc: Any, label: str = "") -> ScriptedTrace:
        if isinstance(doc, list):
            doc = {"steps": doc}
        if not isinstance(doc, dict) or not isinstance(doc.get("steps"), list):
            raise ScenarioError(f"trace {label!r}: expected an object with a steps list")
        steps = []
        for i, raw in enumerate(doc["steps"]):
            where = f"trace {label or doc.get('label', '')!r} step {i}"
            if not isinstance(raw, dict):
                raise ScenarioError(f"{where}: not an object")
            extra = set(raw) - _STEP_KEYS
            if extra:
                raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")
            when = raw.get("when", {})
            if not isinstance(when, dict) or set(when) - _WHEN_KEYS:
                raise ScenarioError(f"{where}: trigger keys must be among {sorted(_WHEN_KEYS)}")
            try:
                actions = actions_from_list(raw["actions"]) if "actions" in raw else None
            except (ValueError, TypeError) as exc:
                raise ScenarioError(f"{where}: {exc}") from exc
            if "emit" in raw:
                actions = (*(actions or ()), AgentAction(ActionKind.EMIT_JSON, {"document": raw["emit"]}))
            text = raw.get("text")
            if actions is None and text is None:
                actions = (AgentAction(ActionKind.IDLE),)
            iterations = raw.get("iterations", 1)
            if not isinstance(iterations, int) or iterations < 1:
                raise ScenarioError(f"{where}: iterations must be a positive integer")
            steps.append(
                TraceStep(dict(when), actions, text, float(raw.get("cost", 0.0)), iterations, bool(raw.get("repeat")))
            )
        return cls(tuple(steps), doc.get("label", label))

    @classmethod
    def load(cls, path: str | Path) -> ScriptedTrace:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"cannot read trace {path}: {exc}") from exc
        return cls.from_dict(doc, label=Path(path).stem)


@dataclass
class ScriptedBackend:
    """Replays per-agent traces; safe to share between concurrently running agents."""

    traces: dict[str, ScriptedTrace] = field(default_factory=dict)
    fallback: Backend | None = None
    _consumed: dict[str, set[int]] = field(default_factory=dict, repr=False)

    async def respond(self, request: TurnRequest) -> BackendReply:
        trace = self.traces.get(request.agent_id)
        if trace is not None:
            used = self._consumed.setdefault(request.agent_id, set())
            fields = request.trigger_fields()
            for i, step in enumerate(trace.steps):
                if i in used or not step.matches(fields):
                    continue
                if not step.repeat:
                    used.add(i)
                return step.reply()
        if self.fallback is not None:
            return await self.fallback.respond(request)
        return BackendReply(actions=(AgentAction(ActionKind.IDLE),))

    def unused_steps(self, agent_id: str) -> list[int]:
        trace = self.traces.get(agent_id)
        if trace is None:
            return []
        used = self._consumed.get(agent_id, set())
        return [i for i, s in enumerate(trace.steps) if i not in used and not s.repeat]


def load_traces(doc: Mapping[str, Any]) -> dict[str, ScriptedTrace]:
    if not isinstance(doc, Mapping):
        raise ScenarioError("traces must map agent ids to trace objects")
    return {agent: ScriptedTrace.from_dict(t, label=agent) for agent, t in sorted(doc.items())}
