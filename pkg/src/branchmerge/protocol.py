"""Manager <-> engineer message schemas.

Two task shapes exist on the wire. The *code* shape targets a file and a set
of functions; the *open* shape carries a free-form requirement and a task
category, for work that has no file layout yet. Parsing is strict: unknown
keys, missing keys and wrong types are all rejected.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from branchmerge import _json
from branchmerge.depgraph import Complexity, DependencyGraph
from branchmerge.errors import (
    MalformedJson,
    OverlappingFunctions,
    RestrictedFileAssignment,
    SchemaViolation,
    UnknownEngineer,
    UnknownFile,
)
from branchmerge.ingestion import matches_any


class TaskCategory(str, Enum):
    CODE_DEVELOPMENT = "code_development"
    EXPERIMENT_RUNNING = "experiment_running"
    RESULTS_ANALYSIS = "results_analysis"
    OTHER = "other"

    @property
    def wire(self) -> str:
        return _CATEGORY_WIRE[self]

    @classmethod
    def from_wire(cls, text: str) -> TaskCategory:
        for cat, label in _CATEGORY_WIRE.items():
            if label == text:
                return cat
        raise ValueError(text)


_CATEGORY_WIRE = {
    TaskCategory.CODE_DEVELOPMENT: "Code Development",
    TaskCategory.EXPERIMENT_RUNNING: "Experiment Running",
    TaskCategory.RESULTS_ANALYSIS: "Results Analysis",
    TaskCategory.OTHER: "Other",
}


class Outcome(str, Enum):
    COMMITTED = "committed"
    PARTIAL = "partial"
    FAILED = "failed"


@dataclass(frozen=True)
class Assignment:
    engineer_id: str
    task_id: str
    file_path: str | None = None
    functions_to_implement: tuple[str, ...] = ()
    instruction: str = ""
    complexity: Complexity = Complexity.SIMPLE
    task_category: TaskCategory | None = None
    task_node_id: str | None = None
    requirements: str | None = None

    @property
    def open_ended(self) -> bool:
        return self.file_path is None

    @property
    def base_task_id(self) -> str:
        return self.task_id[4:] if self.task_id.startswith("fix-") else self.task_id


@dataclass(frozen=True)
class RemainingTask:
    task_id: str
    file_path: str | None = None
    functions: tuple[str, ...] = ()
    complexity: Complexity = Complexity.SIMPLE
    depends_on: tuple[str, ...] = ()
    task_category: TaskCategory | None = None
    task_node_id: str | None = None
    requirements: str | None = None


@dataclass(frozen=True)
class DelegationPlan:
    num_agents: int
    reasoning: str
    first_round: tuple[Assignment, ...] = ()
    remaining_tasks: tuple[RemainingTask, ...] = ()


@dataclass(frozen=True)
class AssignTask:
    reasoning: str
    assignments: tuple[Assignment, ...] = ()
    # Commit0-style replies say "assignments", open-task replies say "tasks"
    list_key: str = "assignments"


@dataclass(frozen=True)
class CompletionSignal:
    engineer_id: str
    task_id: str
    outcome: Outcome
    commit_id: str | None = None
    verification: Mapping[str, Any] | None = field(default=None, compare=True, hash=False)

    def __post_init__(self) -> None:
        if self.outcome is Outcome.COMMITTED and not self.commit_id:
            raise ValueError("a committed outcome requires a commit_id")


@dataclass(frozen=True)
class ProtocolLimits:
    """What the parser checks plans against."""

    max_agents: int
    engineer_ids: tuple[str, ...] | None = None
    restricted: tuple[str, ...] = ()


Message = Union[DelegationPlan, Assignment, CompletionSignal, AssignTask]


# -- decoding helpers ---------------------------------------------------------


def _load(raw: bytes | str) -> Any:
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"not UTF-8: {exc}") from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(exc)) from exc


def _obj(value: Any, where: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    if not isinstance(value, dict):
        raise SchemaViolation(where, "expected an object")
    for key in value:
        if key not in required and key not in optional:
            raise SchemaViolation(f"{where}.{key}" if where else key, "unknown field")
    for key in required:
        if key not in value:
            raise SchemaViolation(key, "missing required field")
    return value


def _str(value: Any, name: str, *, nonempty: bool = False) -> str:
    if not isinstance(value, str):
        raise SchemaViolation(name, "expected a string")
    if nonempty and not value.strip():
        raise SchemaViolation(name, "must not be empty")
    return value


def _str_list(value: Any, name: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise SchemaViolation(name, "expected a list of non-empty strings")
    if len(set(value)) != len(value):
        raise SchemaViolation(name, "duplicate entries")
    return tuple(value)


def _complexity(value: Any, name: str) -> Complexity:
    try:
        return Complexity(_str(value, name))
    except ValueError:
        raise SchemaViolation(name, "expected simple|medium|complex") from None


def _category(value: Any) -> TaskCategory:
    try:
        return TaskCategory.from_wire(_str(value, "task_category"))
    except ValueError:
        raise SchemaViolation(
            "task_category", "expected Code Development|Experiment Running|Results Analysis|Other"
        ) from None


_CODE_TASK = ("engineer_id", "task_id", "file_path", "functions_to_implement", "instruction", "complexity")
_OPEN_TASK = ("engineer_id", "task_id", "requirements", "task_category", "estimated_complexity", "instruction")


def _assignment(value: Any) -> Assignment:
    if isinstance(value, dict) and "file_path" in value:
        d = _obj(value, "task", _CODE_TASK)
        return Assignment(
            engineer_id=_str(d["engineer_id"], "engineer_id", nonempty=True),
            task_id=_str(d["task_id"], "task_id", nonempty=True),
            file_path=_str(d["file_path"], "file_path", nonempty=True),
            functions_to_implement=_str_list(d["functions_to_implement"], "functions_to_implement"),
            instruction=_str(d["instruction"], "instruction"),
            complexity=_complexity(d["complexity"], "complexity"),
        )
    d = _obj(value, "task", _OPEN_TASK, ("task_node_id",))
    node = d.get("task_node_id")
    return Assignment(
        engineer_id=_str(d["engineer_id"], "engineer_id", nonempty=True),
        task_id=_str(d["task_id"], "task_id", nonempty=True),
        instruction=_str(d["instruction"], "instruction"),
        complexity=_complexity(d["estimated_complexity"], "estimated_complexity"),
        task_category=_category(d["task_category"]),
        task_node_id=None if node is None else _str(node, "task_node_id"),
        requirements=_str(d["requirements"], "requirements"),
    )


def _remaining(value: Any) -> RemainingTask:
    if isinstance(value, dict) and "file_path" in value:
        d = _obj(value, "remaining_tasks", ("task_id", "file_path", "functions_to_implement", "complexity", "depends_on"))
        return RemainingTask(
            task_id=_str(d["task_id"], "task_id", nonempty=True),
            file_path=_str(d["file_path"], "file_path", nonempty=True),
            functions=_str_list(d["functions_to_implement"], "functions_to_implement"),
            complexity=_complexity(d["complexity"], "complexity"),
            depends_on=_str_list(d["depends_on"], "depends_on"),
        )
    d = _obj(
        value,
        "remaining_tasks",
        ("task_id", "requirements", "task_category", "estimated_complexity", "depends_on"),
        ("task_node_id",),
    )
    node = d.get("task_node_id")
    return RemainingTask(
        task_id=_str(d["task_id"], "task_id", nonempty=True),
        complexity=_complexity(d["estimated_complexity"], "estimated_complexity"),
        depends_on=_str_list(d["depends_on"], "depends_on"),
        task_category=_category(d["task_category"]),
        task_node_id=None if node is None else _str(node, "task_node_id"),
        requirements=_str(d["requirements"], "requirements"),
    )


# -- validation ---------------------------------------------------------------


def check_disjoint(tasks: Iterable[tuple[str | None, Sequence[str]]]) -> None:
    """Raise OverlappingFunctions when two tasks claim the same (file, function).

    A task with an empty function list claims its whole file.
    """
    claims: dict[str, list[set[str] | None]] = {}
    for path, funcs in tasks:
        if path is None:
            continue
        mine: set[str] | None = set(funcs) or None
        for other in claims.get(path, []):
            if mine is None or other is None:
                names = (mine or set()) | (other or set()) or {"*"}
                raise OverlappingFunctions(path, names)
            shared = mine & other
            if shared:
                raise OverlappingFunctions(path, shared)
        claims.setdefault(path, []).append(mine)


def check_assignment(
    a: Assignment, limits: ProtocolLimits, graph: DependencyGraph | None = None
) -> None:
    if limits.engineer_ids is not None and a.engineer_id not in limits.engineer_ids:
        raise UnknownEngineer(a.engineer_id)
    if a.file_path is None:
        return
    if matches_any(a.file_path, limits.restricted):
        raise RestrictedFileAssignment(a.file_path)
    if graph is not None and a.file_path not in graph.files():
        raise UnknownFile(a.file_path)


def validate_plan(plan: DelegationPlan, limits: ProtocolLimits, graph: DependencyGraph | None = None) -> None:
    if plan.num_agents < 1:
        raise SchemaViolation("num_agents", "must be >= 1")
    if plan.num_agents > limits.max_agents:
        raise SchemaViolation("num_agents", f"exceeds the configured {limits.max_agents} engineers")
    if len(plan.first_round) > plan.num_agents:
        raise SchemaViolation("tasks", "more first-round tasks than num_agents")
    engineers = [a.engineer_id for a in plan.first_round]
    if len(set(engineers)) != len(engineers):
        raise SchemaViolation("engineer_id", "first-round tasks must go to distinct engineers")
    ids = [a.task_id for a in plan.first_round] + [t.task_id for t in plan.remaining_tasks]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("task_id", "task ids must be unique within a plan")
    for a in plan.first_round:
        check_assignment(a, limits, graph)
    for t in plan.remaining_tasks:
        if t.file_path is not None:
            if matches_any(t.file_path, limits.restricted):
                raise RestrictedFileAssignment(t.file_path)
            if graph is not None and t.file_path not in graph.files():
                raise UnknownFile(t.file_path)
    # depends_on may name task ids or, for file-shaped plans, file paths
    known = set(ids) | {a.file_path for a in plan.first_round if a.file_path} | {
        t.file_path for t in plan.remaining_tasks if t.file_path
    }
    if graph is not None:
        known |= graph.files() | set(graph.units)
    for t in plan.remaining_tasks:
        for dep in t.depends_on:
            if dep not in known:
                raise SchemaViolation("depends_on", f"unknown reference {dep!r}")
    check_disjoint(
        [(a.file_path, a.functions_to_implement) for a in plan.first_round]
        + [(t.file_path, t.functions) for t in plan.remaining_tasks]
    )


def shared_write_regions(assignments: Iterable[Assignment]) -> dict[str, list[str]]:
    """Files handed to more than one engineer at once (legal, but merge-prone).

    Returns ``file -> sorted engineer ids`` for every such file.
    """
    owners: dict[str, set[str]] = {}
    for a in assignments:
        if a.file_path is not None:
            owners.setdefault(a.file_path, set()).add(a.engineer_id)
    return {f: sorted(e) for f, e in sorted(owners.items()) if len(e) > 1}


# -- public parsers -----------------------------------------------------------


def decode_delegation_plan(raw: bytes | str) -> DelegationPlan:
    """Schema-only decode; see :func:`parse_delegation_plan` for full checks."""
    doc = _obj(_load(raw), "", ("delegation_plan",))
    body = _obj(doc["delegation_plan"], "delegation_plan", ("first_round", "remaining_tasks"))
    first = _obj(body["first_round"], "first_round", ("num_agents", "reasoning", "tasks"))
    n = first["num_agents"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise SchemaViolation("num_agents", "expected an integer")
    if n < 1:
        raise SchemaViolation("num_agents", "must be >= 1")
    if not isinstance(first["tasks"], list):
        raise SchemaViolation("tasks", "expected a list")
    if not isinstance(body["remaining_tasks"], list):
        raise SchemaViolation("remaining_tasks", "expected a list")
    return DelegationPlan(
        num_agents=n,
        reasoning=_str(first["reasoning"], "reasoning"),
        first_round=tuple(_assignment(t) for t in first["tasks"]),
        remaining_tasks=tuple(_remaining(t) for t in body["remaining_tasks"]),
    )


def parse_delegation_plan(
    raw: bytes | str, limits: ProtocolLimits, graph: DependencyGraph | None = None
) -> DelegationPlan:
    plan = decode_delegation_plan(raw)
    validate_plan(plan, limits, graph)
    return plan


def decode_assign_task(raw: bytes | str) -> AssignTask:
    doc = _obj(_load(raw), "", ("assign_task",))
    body = doc["assign_task"]
    if isinstance(body, dict) and "tasks" in body and "assignments" not in body:
        key = "tasks"
    else:
        key = "assignments"
    body = _obj(body, "assign_task", ("reasoning", key))
    if not isinstance(body[key], list):
        raise SchemaViolation(key, "expected a list")
    items = tuple(_assignment(a) for a in body[key])
    ids = [a.task_id for a in items]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("task_id", "task ids must be unique")
    check_disjoint([(a.file_path, a.functions_to_implement) for a in items])
    return AssignTask(reasoning=_str(body["reasoning"], "reasoning"), assignments=items, list_key=key)


def parse_assign_task(
    raw: bytes | str, limits: ProtocolLimits, graph: DependencyGraph | None = None
) -> AssignTask:
    message = decode_assign_task(raw)
    for a in message.assignments:
        check_assignment(a, limits, graph)
    return message


def parse_assignment_response(raw: bytes | str) -> list[Assignment]:
    return list(decode_assign_task(raw).assignments)


def decode_completion(raw: bytes | str) -> CompletionSignal:
    d = _obj(_load(raw), "", ("engineer_id", "task_id", "commit_id", "verification", "outcome"))
    try:
        outcome = Outcome(_str(d["outcome"], "outcome"))
    except ValueError:
        raise SchemaViolation("outcome", "expected committed|partial|failed") from None
    commit = d["commit_id"]
    if commit is not None:
        _str(commit, "commit_id", nonempty=True)
    if outcome is Outcome.COMMITTED and commit is None:
        raise SchemaViolation("commit_id", "required for a committed outcome")
    ver = d["verification"]
    if ver is not None and not isinstance(ver, dict):
        raise SchemaViolation("verification", "expected an object or null")
    return CompletionSignal(
        engineer_id=_str(d["engineer_id"], "engineer_id", nonempty=True),
        task_id=_str(d["task_id"], "task_id", nonempty=True),
        outcome=outcome,
        commit_id=commit,
        verification=ver,
    )


def decode_assignment(raw: bytes | str) -> Assignment:
    return _assignment(_load(raw))


# -- encoding -----------------------------------------------------------------


def assignment_to_dict(a: Assignment) -> dict:
    if a.file_path is not None:
        return {
            "engineer_id": a.engineer_id,
            "task_id": a.task_id,
            "file_path": a.file_path,
            "functions_to_implement": list(a.functions_to_implement),
            "instruction": a.instruction,
            "complexity": a.complexity.value,
        }
    d: dict[str, Any] = {"engineer_id": a.engineer_id, "task_id": a.task_id}
    if a.task_node_id is not None:
        d["task_node_id"] = a.task_node_id
    d["requirements"] = a.requirements or ""
    d["task_category"] = (a.task_category or TaskCategory.OTHER).wire
    d["estimated_complexity"] = a.complexity.value
    d["instruction"] = a.instruction
    return d


def remaining_to_dict(t: RemainingTask) -> dict:
    if t.file_path is not None:
        return {
            "task_id": t.task_id,
            "file_path": t.file_path,
            "functions_to_implement": list(t.functions),
            "complexity": t.complexity.value,
            "depends_on": list(t.depends_on),
        }
    d: dict[str, Any] = {"task_id": t.task_id}
    if t.task_node_id is not None:
        d["task_node_id"] = t.task_node_id
    d["requirements"] = t.requirements or ""
    d["task_category"] = (t.task_category or TaskCategory.OTHER).wire
    d["estimated_complexity"] = t.complexity.value
    d["depends_on"] = list(t.depends_on)
    return d


def to_dict(message: Message) -> dict:
    if isinstance(message, DelegationPlan):
        return {
            "delegation_plan": {
                "first_round": {
                    "num_agents": message.num_agents,
                    "reasoning": message.reasoning,
                    "tasks": [assignment_to_dict(a) for a in message.first_round],
                },
                "remaining_tasks": [remaining_to_dict(t) for t in message.remaining_tasks],
            }
        }
    if isinstance(message, AssignTask):
        return {
            "assign_task": {
                "reasoning": message.reasoning,
                message.list_key: [assignment_to_dict(a) for a in message.assignments],
            }
        }
    if isinstance(message, Assignment):
        return assignment_to_dict(message)
    if isinstance(message, CompletionSignal):
        return {
            "engineer_id": message.engineer_id,
            "task_id": message.task_id,
            "commit_id": message.commit_id,
            "verification": None if message.verification is None else dict(message.verification),
            "outcome": message.outcome.value,
        }
    raise TypeError(f"not a protocol message: {type(message).__name__}")


def serialize(message: Message) -> bytes:
    return _json.dumps(to_dict(message))


def parse(raw: bytes | str, kind: type) -> Message:
    """Inverse of :func:`serialize` for a known message type."""
    if kind is DelegationPlan:
        return decode_delegation_plan(raw)
    if kind is AssignTask:
        return decode_assign_task(raw)
    if kind is Assignment:
        return decode_assignment(raw)
    if kind is CompletionSignal:
        return decode_completion(raw)
    raise TypeError(kind)
