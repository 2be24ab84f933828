"""Event log, Gantt export and run metrics.

Time is logical: the coordinator's step counter. Everything here can be rebuilt
from the JSON-lines event log alone, which is what ``report`` does.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, TextIO

import jsonschema

from branchmerge import _json
from branchmerge.errors import CorruptLog, MissingScore


class Phase(str, Enum):
    EXPLORE = "explore"
    DELEGATE = "delegate"
    IMPLEMENT = "implement"
    VERIFY = "verify"
    MERGE = "merge"
    CONFLICT_RESOLVE = "conflict_resolve"
    IDLE = "idle"
    REVIEW = "review"


@dataclass(frozen=True)
class TimelineEvent:
    t_start: int
    t_end: int
    actor: str
    phase: Phase
    file: str | None = None
    task_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.t_start > self.t_end:
            raise ValueError(f"t_start {self.t_start} after t_end {self.t_end}")
        if self.phase is Phase.IMPLEMENT and not self.file:
            raise ValueError("implement events must name a file")

    def to_bar(self) -> dict:
        return {
            "actor": self.actor,
            "phase": self.phase.value,
            "file": self.file,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "task_id": self.task_id,
        }


@dataclass(frozen=True)
class LogEvent:
    time: int
    kind: str
    engineer_id: str | None = None
    task_id: str | None = None
    file: str | None = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"time": self.time, "kind": self.kind}
        if self.engineer_id is not None:
            d["engineer_id"] = self.engineer_id
        if self.task_id is not None:
            d["task_id"] = self.task_id
        if self.file is not None:
            d["file"] = self.file
        d["detail"] = self.detail
        return d


class EventLog:
    """Ordered event store, optionally mirrored line by line to a text stream."""

    def __init__(self, stream: TextIO | None = None) -> None:
        self.events: list[LogEvent] = []
        self._stream = stream

    def emit(
        self,
        kind: str,
        time: int,
        *,
        engineer_id: str | None = None,
        task_id: str | None = None,
        file: str | None = None,
        **detail: Any,
    ) -> LogEvent:
        event = LogEvent(time, kind, engineer_id, task_id, file, detail)
        self.events.append(event)
        if self._stream is not None:
            self._stream.write(_json.dumps_line(event.to_dict()) + "\n")
        return event

    def record(self, event: TimelineEvent) -> LogEvent:
        engineer = None if event.actor == "manager" else event.actor
        return self.emit(
            "phase",
            event.t_end,
            engineer_id=engineer,
            task_id=event.task_id,
            file=event.file,
            actor=event.actor,
            phase=event.phase.value,
            t_start=event.t_start,
            t_end=event.t_end,
        )

    @property
    def timeline(self) -> list[TimelineEvent]:
        return timeline_from_log(self.events)

    def of_kind(self, kind: str) -> list[LogEvent]:
        return [e for e in self.events if e.kind == kind]

    def dumps(self) -> str:
        return "".join(_json.dumps_line(e.to_dict()) + "\n" for e in self.events)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


class PhaseTracker:
    """Turns per-step phase changes into contiguous bars on an event log.

    Each actor has at most one open bar. Re-entering the same (phase, file,
    task) extends it; anything else closes it. Zero-length bars are dropped.
    """

    def __init__(self, log: EventLog) -> None:
        self.log = log
        self._open: dict[str, tuple[int, Phase, str | None, str | None]] = {}

    def enter(
        self, actor: str, phase: Phase | None, now: int, *, file: str | None = None, task_id: str | None = None
    ) -> None:
        current = self._open.get(actor)
        if current is not None and phase is not None and current[1:] == (phase, file, task_id):
            return
        self.close(actor, now)
        if phase is not None:
            self._open[actor] = (now, Phase(phase), file, task_id)

    def close(self, actor: str, now: int) -> None:
        current = self._open.pop(actor, None)
        if current is None:
            return
        start, phase, file, task_id = current
        if now > start:
            self.log.record(TimelineEvent(start, now, actor, phase, file, task_id))

    def close_all(self, now: int) -> None:
        for actor in sorted(self._open, key=_actor_order):
            self.close(actor, now)

    def bar(self, actor: str, phase: Phase, start: int, end: int, **kw: str | None) -> None:
        """Record a finished interval directly (used for manager phases)."""
        if end > start:
            self.log.record(TimelineEvent(start, end, actor, Phase(phase), kw.get("file"), kw.get("task_id")))


def parse_log(text: str) -> list[LogEvent]:
    if text and not text.endswith("\n"):
        raise CorruptLog("log does not end with a newline (truncated?)")
    events: list[LogEvent] = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptLog(f"line {n}: {exc}") from exc
        if not isinstance(d, dict) or not isinstance(d.get("time"), int) or not isinstance(d.get("kind"), str):
            raise CorruptLog(f"line {n}: missing time/kind")
        if not isinstance(d.get("detail"), dict):
            raise CorruptLog(f"line {n}: missing detail object")
        extra = set(d) - {"time", "kind", "engineer_id", "task_id", "file", "detail"}
        if extra:
            raise CorruptLog(f"line {n}: unexpected keys {sorted(extra)}")
        events.append(
            LogEvent(d["time"], d["kind"], d.get("engineer_id"), d.get("task_id"), d.get("file"), d["detail"])
        )
    return events


def read_log(path: str | Path) -> list[LogEvent]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptLog(f"cannot read {path}: {exc}") from exc
    return parse_log(text)


def timeline_from_log(events: Iterable[LogEvent]) -> list[TimelineEvent]:
    out = []
    for e in events:
        if e.kind != "phase":
            continue
        try:
            out.append(
                TimelineEvent(
                    t_start=e.detail["t_start"],
                    t_end=e.detail["t_end"],
                    actor=e.detail["actor"],
                    phase=Phase(e.detail["phase"]),
                    file=e.file,
                    task_id=e.task_id,
                )
            )
        except (KeyError, ValueError) as exc:
            raise CorruptLog(f"bad phase event at time {e.time}: {exc}") from exc
    return out


# -- Gantt --------------------------------------------------------------------

GANTT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["actors", "bars"],
    "properties": {
        "actors": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "bars": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["actor", "phase", "file", "t_start", "t_end", "task_id"],
                "properties": {
                    "actor": {"type": "string"},
                    "phase": {"enum": [p.value for p in Phase]},
                    "file": {"type": ["string", "null"]},
                    "t_start": {"type": "integer", "minimum": 0},
                    "t_end": {"type": "integer", "minimum": 0},
                    "task_id": {"type": ["string", "null"]},
                },
            },
        },
    },
}


def _actor_order(actor: str) -> tuple[int, str]:
    return (0 if actor == "manager" else 1, actor)


def export_gantt(events: Iterable[TimelineEvent], actors: Iterable[str] = ()) -> dict:
    """Rows are actors (manager first), bars are phase intervals."""
    events = list(events)
    names = set(actors) | {e.actor for e in events}
    if events or names:
        names.add("manager")
    bars = sorted(
        (e.to_bar() for e in events),
        key=lambda b: (b["t_start"], b["t_end"], _actor_order(b["actor"]), b["phase"], b["file"] or ""),
    )
    return {"actors": sorted(names, key=_actor_order), "bars": bars}


def validate_gantt(doc: Any) -> None:
    """Raise ``jsonschema.ValidationError`` or ValueError on a malformed document."""
    jsonschema.validate(doc, GANTT_SCHEMA)
    actors = set(doc["actors"])
    for bar in doc["bars"]:
        if bar["actor"] not in actors:
            raise ValueError(f"bar for undeclared actor {bar['actor']!r}")
        if bar["t_start"] > bar["t_end"]:
            raise ValueError("bar ends before it starts")
        if bar["phase"] == Phase.IMPLEMENT.value and not bar["file"]:
            raise ValueError("implement bar without a file")


def merge_overlaps(doc: dict) -> list[tuple[dict, dict]]:
    """Pairs of merge bars whose half-open intervals intersect."""
    merges = sorted((b for b in doc["bars"] if b["phase"] == "merge"), key=lambda b: (b["t_start"], b["t_end"]))
    return [(a, b) for a, b in zip(merges, merges[1:]) if b["t_start"] < a["t_end"]]


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class RunMetrics:
    score: float | None
    runtime: float
    cost: float
    iterations: int
    runtime_unit: str = "logical"

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "runtime": self.runtime,
            "cost": self.cost,
            "iterations": self.iterations,
            "runtime_unit": self.runtime_unit,
        }


ScoreSource = float | None | Callable[[], float]


def compute_metrics(
    events: Sequence[TimelineEvent],
    turns: Iterable[Any],
    score_source: ScoreSource = None,
    *,
    strict: bool = False,
) -> RunMetrics:
    """Aggregate a finished run.

    ``turns`` are objects with ``iterations_consumed`` and ``cost``. A missing
    score is reported as None, or raised as MissingScore when ``strict``.
    """
    iterations = 0
    cost = 0.0
    for t in turns:
        iterations += t.iterations_consumed
        cost += t.cost
    runtime = max((e.t_end for e in events), default=0)
    score: float | None
    try:
        score = score_source() if callable(score_source) else score_source
    except MissingScore:
        score = None
    if score is None and strict:
        raise MissingScore("no score source for this run")
    if score is not None and (math.isnan(score) or not 0.0 <= score <= 1.0):
        raise ValueError(f"score must be a fraction in [0, 1], got {score}")
    return RunMetrics(score=score, runtime=float(runtime), cost=cost, iterations=iterations)


@dataclass(frozen=True)
class _LoggedTurn:
    iterations_consumed: int
    cost: float


def metrics_from_log(events: Sequence[LogEvent]) -> RunMetrics:
    """Recompute metrics purely from a recorded event stream."""
    turns = [
        _LoggedTurn(e.detail["iterations"], e.detail["cost"]) for e in events if e.kind == "turn"
    ]
    scores = [e.detail.get("score") for e in events if e.kind == "score"]
    return compute_metrics(timeline_from_log(events), turns, scores[-1] if scores else None)
