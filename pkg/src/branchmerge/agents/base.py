"""Agent turn abstraction shared by every backend."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Any, Protocol, TypeVar

from branchmerge import _json
from branchmerge.errors import BackendFailure, BudgetExhausted, ProtocolError
from branchmerge.protocol import _load

MAX_REPROMPTS = 2

T = TypeVar("T")


class Role(str, Enum):
    MANAGER = "manager"
    ENGINEER = "engineer"


class ActionKind(str, Enum):
    EDIT_FILE = "edit_file"
    RUN_COMMAND = "run_command"
    EMIT_JSON = "emit_json"
    COMMIT_REQUEST = "commit_request"
    IDLE = "idle"


class EngineerStatus(str, Enum):
    IDLE = "idle"
    WORKING = "working"
    VERIFYING = "verifying"
    RESOLVING_CONFLICT = "resolving_conflict"
    RETIRED = "retired"


@dataclass(frozen=True)
class AgentAction:
    kind: ActionKind
    payload: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if self.kind is ActionKind.EDIT_FILE:
            p = self.payload
            if not isinstance(p.get("path"), str):
                raise ValueError("edit_file needs a string path")
            whole = isinstance(p.get("content"), str)
            replace = isinstance(p.get("old"), str) and isinstance(p.get("new"), str)
            if whole == replace:
                raise ValueError("edit_file needs either content or old/new")
        elif self.kind is ActionKind.RUN_COMMAND and not isinstance(self.payload.get("command"), str):
            raise ValueError("run_command needs a command string")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: Any) -> AgentAction:
        if not isinstance(d, dict) or "kind" not in d:
            raise ValueError(f"not an action record: {d!r}")
        extra = set(d) - {"kind", "payload"}
        if extra:
            raise ValueError(f"unexpected action keys {sorted(extra)}")
        payload = d.get("payload", {})
        if not isinstance(payload, dict):
            raise ValueError("action payload must be an object")
        return cls(ActionKind(d["kind"]), payload)


def is_confined(path: str, root: Path | None = None) -> bool:
    """True when ``path`` is a plain relative path that stays inside ``root``."""
    if not path or "\\" in path or "\x00" in path:
        return False
    pure = PurePosixPath(path)
    if pure.is_absolute() or ".." in pure.parts or pure.parts[:1] == (".git",):
        return False
    if root is not None:
        base = root.resolve()
        try:
            (base / pure).resolve().relative_to(base)
        except ValueError:
            return False
    return True


def action_path(action: AgentAction) -> str | None:
    if action.kind is ActionKind.EDIT_FILE:
        return action.payload["path"]
    return None


@dataclass(frozen=True)
class AgentTurn:
    role: Role
    agent_id: str
    inputs: tuple[dict, ...]
    outputs: tuple[AgentAction, ...]
    iterations_consumed: int
    cost: float = 0.0
    # actions the backend proposed that were refused before execution
    rejected: tuple[AgentAction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if self.iterations_consumed < 1:
            raise ValueError("a turn consumes at least one iteration")
        if self.cost < 0:
            raise ValueError("cost cannot be negative")

    @property
    def commit_requested(self) -> bool:
        return any(a.kind is ActionKind.COMMIT_REQUEST for a in self.outputs)

    @property
    def emitted(self) -> list[Any]:
        return [a.payload.get("document") for a in self.outputs if a.kind is ActionKind.EMIT_JSON]


@dataclass
class Budget:
    agent_id: str
    limit: int
    used: int = 0

    def __post_init__(self) -> None:
        if self.limit < 1:
            raise ValueError("iteration budget must be >= 1")

    @property
    def remaining(self) -> int:
        return self.limit - self.used

    def require(self) -> None:
        if self.remaining <= 0:
            raise BudgetExhausted(self.agent_id)

    def charge(self, n: int) -> int:
        """Consume up to ``n`` iterations (at least one); returns what was charged."""
        self.require()
        taken = max(1, min(n, self.remaining))
        self.used += taken
        return taken


@dataclass
class EngineerState:
    engineer_id: str
    status: EngineerStatus = EngineerStatus.IDLE
    iteration_budget: int = 80
    current_task: str | None = None

    def __post_init__(self) -> None:
        self.status = EngineerStatus(self.status)
        self.check()

    def check(self) -> None:
        if self.status is EngineerStatus.WORKING and self.current_task is None:
            raise ValueError(f"{self.engineer_id} is working without a task")
        if self.iteration_budget < 0:
            raise ValueError("negative iteration budget")


@dataclass(frozen=True)
class TurnRequest:
    """Everything a backend sees for one turn.

    ``kind`` is one of delegate, assign, review, final_review (manager) or
    implement, resolve (engineer). ``state`` carries the trigger fields used by
    scripted traces plus structured context for planners.
    """

    role: Role
    agent_id: str
    kind: str
    messages: tuple[dict, ...]
    state: dict = field(default_factory=dict)

    def trigger_fields(self) -> dict:
        return {"agent": self.agent_id, "kind": self.kind, **{k: self.state.get(k) for k in TRIGGER_KEYS}}


TRIGGER_KEYS = ("status", "task_id", "last_event", "attempt")


@dataclass(frozen=True)
class BackendReply:
    actions: tuple[AgentAction, ...] | None = None
    text: str | None = None
    cost: float = 0.0
    iterations: int = 1


class Backend(Protocol):
    async def respond(self, request: TurnRequest) -> BackendReply: ...


def reply_document(reply: BackendReply) -> Any:
    """The JSON document a manager reply carries; raises MalformedJson on bad text."""
    if reply.actions is not None:
        docs = [a.payload.get("document") for a in reply.actions if a.kind is ActionKind.EMIT_JSON]
        if len(docs) > 1:
            raise ProtocolError("more than one emit_json action in a manager reply")
        if docs:
            return docs[0]
        if reply.text is None:
            return None
    return _load(strip_fences(reply.text or ""))


def strip_fences(text: str) -> str:
    """Drop a surrounding markdown code fence, which hosted models like to add."""
    t = text.strip()
    if t.startswith("```") and t.endswith("```") and t.count("\n") >= 1:
        t = t[t.index("\n") + 1 : -3].strip()
    return t


async def manager_turn(
    request: TurnRequest,
    backend: Backend,
    budget: Budget,
    validate: Callable[[bytes], T],
    *,
    on_error: Callable[[ProtocolError], None] | None = None,
) -> tuple[AgentTurn, T | None]:
    """Ask the manager for one structured decision.

    ``validate`` receives canonical JSON bytes and returns the parsed message or
    raises ProtocolError. A rejected reply is re-sent with the error appended, at
    most ``MAX_REPROMPTS`` times. A reply without any document means the manager
    chose to do nothing and yields ``None``.
    """
    budget.require()
    messages = list(request.messages)
    spent = 0
    cost = 0.0
    last_error: ProtocolError | None = None
    for attempt in range(MAX_REPROMPTS + 1):
        if attempt:
            if budget.remaining <= 0:
                raise BudgetExhausted(budget.agent_id)
            messages.append({"role": "user", "content": f"Your previous reply was rejected: {last_error}. "
                             "Reply again with a single JSON document that fixes this."})
        req = TurnRequest(request.role, request.agent_id, request.kind, tuple(messages),
                          {**request.state, "reprompt": attempt,
                           **({"last_event": "rejected"} if attempt else {})})
        reply = await backend.respond(req)
        spent += budget.charge(reply.iterations)
        cost += reply.cost
        try:
            doc = reply_document(reply)
            if doc is None:
                turn = AgentTurn(Role.MANAGER, request.agent_id, tuple(messages), (AgentAction(ActionKind.IDLE),),
                                 spent, cost)
                return turn, None
            parsed = validate(_json.dumps(doc))
        except ProtocolError as exc:
            last_error = exc
            if on_error is not None:
                on_error(exc)
            messages.append({"role": "assistant", "content": reply.text or _json.dumps_line(
                [a.to_dict() for a in reply.actions or ()])})
            continue
        action = AgentAction(ActionKind.EMIT_JSON, {"document": doc})
        return AgentTurn(Role.MANAGER, request.agent_id, tuple(messages), (action,), spent, cost), parsed
    raise BackendFailure(f"manager output rejected {MAX_REPROMPTS + 1} times: {last_error}")


async def engineer_turn(
    state: EngineerState,
    request: TurnRequest,
    backend: Backend,
    budget: Budget,
    worktree_root: Path | None = None,
) -> AgentTurn:
    """One engineer step. Actions are returned, not executed.

    Paths that would escape the worktree are moved to ``rejected``.
    """
    if state.status not in (EngineerStatus.WORKING, EngineerStatus.RESOLVING_CONFLICT):
        raise ValueError(f"{state.engineer_id} cannot act while {state.status.value}")
    budget.require()
    reply = await backend.respond(request)
    taken = budget.charge(reply.iterations)
    state.iteration_budget = budget.remaining
    actions = list(reply.actions or ())
    if reply.actions is None and reply.text is not None:
        actions = parse_engineer_text(reply.text)
    kept: list[AgentAction] = []
    rejected: list[AgentAction] = []
    for a in actions:
        path = action_path(a)
        if path is not None and not is_confined(path, worktree_root):
            rejected.append(a)
        else:
            kept.append(a)
    if not kept:
        kept.append(AgentAction(ActionKind.IDLE))
    return AgentTurn(Role.ENGINEER, state.engineer_id, request.messages, tuple(kept), taken, reply.cost,
                     tuple(rejected))


def parse_engineer_text(text: str) -> list[AgentAction]:
    """Decode a free-text engineer reply of the form ``{"actions": [...]}``.

    Unparseable text is treated as an idle step rather than an error: the
    engineer simply burns an iteration.
    """
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        return [AgentAction(ActionKind.IDLE)]
    try:
        doc = json.loads(text[start : end + 1])
        return [AgentAction.from_dict(a) for a in doc["actions"]]
    except (ValueError, KeyError, TypeError):
        return [AgentAction(ActionKind.IDLE)]


def actions_from_list(items: Sequence[Any]) -> tuple[AgentAction, ...]:
    return tuple(AgentAction.from_dict(a) for a in items)
