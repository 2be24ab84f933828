"""The coordination loop.

One coordinator owns the graph, the engineer states and the main branch.
Engineer turns run concurrently; their results are applied, verified and
merged one at a time in engineer-id order, so a run is a pure function of
(config, traces, seed).

Logical time advances by one per coordinator step: a round of engineer turns,
a verification window, each individual merge, and each manager turn.
"""

from __future__ import annotations

import asyncio
import json
import os
import shutil
import subprocess
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, TextIO

from branchmerge import _json
from branchmerge.agents.base import (
    ActionKind,
    AgentAction,
    AgentTurn,
    Backend,
    Budget,
    EngineerState,
    EngineerStatus,
    Role,
    TurnRequest,
    engineer_turn,
    manager_turn,
)
from branchmerge.agents.context import CondensedHistory, PromptBook, condense_history, summarize_turn
from branchmerge.agents.remote import JsonLines, RemoteConfig, remote_backend
from branchmerge.agents.planner import PlannerBackend
from branchmerge.agents.scripted import ScriptedBackend, load_traces
from branchmerge.depgraph import (
    DependencyGraph,
    MajorTaskGroup,
    UnitStatus,
    complete_unit,
    is_ready,
    partition_major_groups,
)
from branchmerge.engine.config import RunConfig
from branchmerge.engine.interference import InterferenceDetector, InterferenceEvent
from branchmerge.errors import (
    BackendFailure,
    BranchMergeError,
    BudgetExhausted,
    EmptyCommit,
    FatalError,
    ProtocolError,
    RestrictedFileChanged,
    ScenarioError,
    SchemaViolation,
    VerificationTimeout,
)
from branchmerge.history import UnresolvedError, snapshot
from branchmerge.ingestion import RepoScan, graph_from_scan, scan_repository
from branchmerge.protocol import (
    AssignTask,
    Assignment,
    CompletionSignal,
    DelegationPlan,
    Outcome,
    ProtocolLimits,
    _load,
    _obj,
    _str,
    assignment_to_dict,
    check_assignment,
    decode_assign_task,
    parse_delegation_plan,
    shared_write_regions,
)
from branchmerge.telemetry import EventLog, Phase, PhaseTracker, RunMetrics, compute_metrics, export_gantt
from branchmerge.verification import (
    DEFAULT_SUITE,
    GateDecision,
    VerificationReport,
    gate_commit,
    run_verification,
    select_tests,
)
from branchmerge.workspace import (
    Git,
    MergeStatus,
    Repository,
    SyncMode,
    Worktree,
    commit_shared,
    commit_worktree,
    create_worktree,
    has_conflict_markers,
    init_main,
    merge_into_main,
    remove_worktree,
    salvage_worktree,
    shared_worktree,
    status_paths,
    sync_worktree,
)

MANAGER = "manager"
_COPY_IGNORE = shutil.ignore_patterns(".git", "__pycache__", "*.pyc", ".pytest_cache")


class TerminationKind(str, Enum):
    COMPLETED = "completed"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ROUNDS_EXHAUSTED = "rounds_exhausted"
    FATAL_ERROR = "fatal_error"


@dataclass(frozen=True)
class TerminationReason:
    kind: TerminationKind
    remaining_units: tuple[str, ...] = ()
    detail: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TerminationKind(self.kind))
        if self.kind is TerminationKind.COMPLETED and self.remaining_units:
            raise ValueError("a completed run cannot have remaining units")

    @property
    def exit_code(self) -> int:
        if self.kind is TerminationKind.COMPLETED:
            return 0
        if self.kind is TerminationKind.FATAL_ERROR:
            return 1
        return 3


@dataclass(frozen=True)
class LoopState:
    """What termination depends on, detached from the live coordinator."""

    remaining_units: tuple[str, ...]
    manager_budget_left: int
    active: tuple[str, ...] = ()
    available: tuple[str, ...] = ()
    retired_for_budget: tuple[str, ...] = ()


def terminate_check(s: LoopState) -> TerminationReason | None:
    """Completed when nothing remains; otherwise a limit reason once no engineer can make progress."""
    if not s.remaining_units:
        return TerminationReason(TerminationKind.COMPLETED)
    if s.active:
        return None
    if s.manager_budget_left <= 0:
        return TerminationReason(TerminationKind.BUDGET_EXHAUSTED, s.remaining_units, "manager budget spent")
    if s.available:
        return None
    if s.retired_for_budget:
        return TerminationReason(TerminationKind.BUDGET_EXHAUSTED, s.remaining_units,
                                 "retired: " + ", ".join(s.retired_for_budget))
    return TerminationReason(TerminationKind.ROUNDS_EXHAUSTED, s.remaining_units)


@dataclass
class Engineer:
    state: EngineerState
    budget: Budget
    group: MajorTaskGroup | None = None
    worktree: Worktree | None = None
    assignment: Assignment | None = None
    unit_id: str | None = None
    rounds_used: int = 0
    attempts: int = 0
    conflict_cycles: int = 0
    touched: list[str] = field(default_factory=list)
    task_start: int = 0
    last_event: str = "start"
    retire_reason: str | None = None
    feedback: str = ""
    conflict_files: list[str] = field(default_factory=list)
    resume: EngineerStatus = EngineerStatus.WORKING

    @property
    def id(self) -> str:
        return self.state.engineer_id

    @property
    def status(self) -> EngineerStatus:
        return self.state.status


@dataclass
class RunResult:
    reason: TerminationReason
    metrics: RunMetrics
    log: EventLog
    config: RunConfig
    interference: list[InterferenceEvent] = field(default_factory=list)
    delegation_warnings: list[dict] = field(default_factory=list)
    turns: list[AgentTurn] = field(default_factory=list)
    graph: DependencyGraph | None = None
    repo_root: Path | None = None
    git_calls: list[dict] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return self.reason.exit_code

    def gantt(self) -> dict:
        return export_gantt(self.log.timeline, [MANAGER, *self.config.engineer_ids])


class Coordinator:
    def __init__(
        self,
        config: RunConfig,
        source: str | Path,
        workdir: str | Path,
        backend: Backend,
        *,
        engineer_backend: Backend | None = None,
        log_stream: TextIO | None = None,
        audit_dir: str | Path | None = None,
    ) -> None:
        self.config = config
        self.policy = config.policy()
        self.source = Path(source)
        self.workdir = Path(workdir)
        self.manager_backend = backend
        self.engineer_backend = engineer_backend or backend
        self.log = EventLog(log_stream)
        self.tracker = PhaseTracker(self.log)
        self.audit = JsonLines(Path(audit_dir) / "turns.jsonl") if audit_dir else None
        self.clock = 0
        self.turns: list[AgentTurn] = []
        self.manager_budget = Budget(MANAGER, config.manager_max_iterations)
        self.engineers: dict[str, Engineer] = {
            eid: Engineer(
                EngineerState(eid, iteration_budget=config.engineer_max_iterations),
                Budget(eid, config.engineer_max_iterations),
            )
            for eid in config.engineer_ids
        }
        self.detector = InterferenceDetector()
        self.history = CondensedHistory()
        self.unresolved: list[UnresolvedError] = []
        self.warnings: list[dict] = []
        self.manager_last_event = "start"
        self._repoll = True
        self.repo: Repository | None = None
        self.scan: RepoScan | None = None
        self.graph = DependencyGraph({})
        self.groups: list[MajorTaskGroup] = []
        self.limits = ProtocolLimits(config.n_engineers, tuple(config.engineer_ids), tuple(config.restricted))

    @property
    def soft(self) -> bool:
        return self.config.isolation == "soft"

    # -- bookkeeping ------------------------------------------------------------

    def _emit(self, kind: str, **kw: Any) -> None:
        self.log.emit(kind, self.clock, **kw)

    def _unit_status(self, uid: str, target: UnitStatus) -> None:
        before = self.graph.status_of(uid)
        if target is UnitStatus.INTEGRATED:
            complete_unit(self.graph, uid)
        else:
            self.graph.set_status(uid, target)
        self._emit("unit_status", task_id=uid, file=self.graph.units[uid].file_path,
                   **{"from": before.value, "to": target.value})

    def _eng_status(self, e: Engineer, target: EngineerStatus, **detail: Any) -> None:
        before = e.state.status
        if before is target:
            return
        e.state.status = target
        if target in (EngineerStatus.IDLE, EngineerStatus.RETIRED):
            e.state.current_task = None
        e.state.check()
        self._emit("engineer_status", engineer_id=e.id, **{"from": before.value, "to": target.value}, **detail)

    def _record_turn(self, turn: AgentTurn, kind: str, request: TurnRequest) -> None:
        self.turns.append(turn)
        self._emit(
            "turn",
            engineer_id=None if turn.role is Role.MANAGER else turn.agent_id,
            role=turn.role.value,
            agent_id=turn.agent_id,
            turn_kind=kind,
            iterations=turn.iterations_consumed,
            cost=turn.cost,
        )
        if self.audit is not None:
            self.audit.write({
                "time": self.clock,
                "agent_id": turn.agent_id,
                "kind": kind,
                "trigger": request.trigger_fields(),
                "outputs": [a.to_dict() for a in turn.outputs],
                "rejected": [a.to_dict() for a in turn.rejected],
                "iterations": turn.iterations_consumed,
                "cost": turn.cost,
            })

    def _available(self) -> list[str]:
        return [
            e.id
            for e in self._sorted()
            if e.status is EngineerStatus.IDLE and e.rounds_used < self.config.max_rounds
        ]

    def _active(self) -> list[Engineer]:
        return [e for e in self._sorted() if e.status in (EngineerStatus.WORKING, EngineerStatus.RESOLVING_CONFLICT)]

    def _sorted(self) -> list[Engineer]:
        return [self.engineers[k] for k in sorted(self.engineers)]

    def loop_state(self) -> LoopState:
        return LoopState(
            remaining_units=tuple(self.graph.remaining()),
            manager_budget_left=self.manager_budget.remaining,
            active=tuple(e.id for e in self._active()),
            available=tuple(self._available()),
            retired_for_budget=tuple(
                e.id for e in self._sorted() if e.retire_reason in ("budget", "conflict_cap", "backend_failure")
            ),
        )

    def _in_flight(self) -> list[str]:
        return sorted(uid for uid, u in self.graph.units.items()
                      if u.status in (UnitStatus.ASSIGNED, UnitStatus.COMPLETED))

    # -- setup ------------------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.config
        root = self.workdir / "repo"
        if root.exists():
            raise FatalError(f"work directory already holds a repository: {root}")
        self.workdir.mkdir(parents=True, exist_ok=True)
        shutil.copytree(self.source, root, ignore=_COPY_IGNORE)
        self.scan = scan_repository(root, test_glob=cfg.test_glob, restricted=cfg.restricted,
                                    transitive_test_map=cfg.transitive_test_map)
        self.repo = init_main(root, restricted=cfg.restricted, git=Git(self.workdir))
        self.graph = graph_from_scan(self.scan, granularity=cfg.granularity,
                                     function_split_threshold=cfg.function_split_threshold)
        self.groups = partition_major_groups(self.graph, cfg.n_engineers)
        for group, eid in zip(self.groups, cfg.engineer_ids):
            group.assigned_engineer = eid
            self.engineers[eid].group = group
        self._emit("graph", units=sorted(self.graph.units), edges=[list(e) for e in sorted(self.graph.edges)],
                   main=self.repo.head)
        for g in self.groups:
            self._emit("group", engineer_id=g.assigned_engineer, group_id=g.group_id, unit_ids=list(g.unit_ids))
        self.clock = 1
        self.tracker.bar(MANAGER, Phase.EXPLORE, 0, 1)
        for e in self._sorted():
            self.tracker.enter(e.id, Phase.IDLE, self.clock)

    # -- manager ----------------------------------------------------------------

    def _manager_state(self, kind: str, **extra: Any) -> dict:
        return {
            "status": "active",
            "task_id": extra.pop("task_id", None),
            "last_event": self.manager_last_event,
            "attempt": None,
            "graph": self.graph.to_dict(),
            "coverage": dict(sorted(self.graph.coverage.items())),
            "groups": [
                {"group_id": g.group_id, "unit_ids": list(g.unit_ids), "engineer": g.assigned_engineer}
                for g in self.groups
            ],
            "eligible": self._available(),
            "busy": [e.id for e in self._active()],
            "in_flight": self._in_flight(),
            "num_engineers": self.config.n_engineers,
            "restricted": ", ".join(self.config.restricted),
            "round": self.graph.round,
            "history": self._history_text(),
            **extra,
        }

    def _history_text(self) -> str:
        lines = list(self.history.summary.lines) if self.history.summary else []
        start = self.history.summary.turns_summarized if self.history.summary else 0
        lines += [summarize_turn(start + i, t) for i, t in enumerate(self.history.turns)]
        return "\n".join(lines) or "(none yet)"

    async def _manager(self, kind: str, validate: Callable[[bytes], Any], **extra: Any) -> Any:
        start = self.clock
        state = self._manager_state(kind, **extra)
        artifacts = snapshot(self.graph, self.unresolved)
        context = {"role": "context", "content": _json.dumps_line({"kind": kind, "artifacts": artifacts.to_dict()})}
        request = TurnRequest(Role.MANAGER, MANAGER, kind, (context,), state)

        def on_error(exc: ProtocolError) -> None:
            self._emit("delegation_error", turn_kind=kind, error=str(exc))

        try:
            turn, parsed = await manager_turn(request, self.manager_backend, self.manager_budget, validate,
                                              on_error=on_error)
        except BudgetExhausted:
            self._emit("budget_exhausted", agent_id=MANAGER)
            return None
        self.clock += 1
        self._record_turn(turn, kind, request)
        self.tracker.bar(MANAGER, Phase.REVIEW if "review" in kind else Phase.DELEGATE, start, self.clock)
        self.history = condense_history(self.history.append(turn), snapshot(self.graph, self.unresolved),
                                        self.config.condensation_window)
        self.manager_last_event = kind
        return parsed

    def _unit_for(self, a: Assignment) -> str:
        if a.task_node_id and a.task_node_id in self.graph.units:
            return a.task_node_id
        if a.base_task_id in self.graph.units:
            return a.base_task_id
        raise SchemaViolation("task_id", f"{a.task_id!r} names no work unit")

    def _check_issuable(self, assignments: tuple[Assignment, ...]) -> None:
        """Mechanical safety checks; the manager's word is not trusted."""
        available = set(self._available())
        seen_units: set[str] = set()
        seen_engineers: set[str] = set()
        for a in assignments:
            check_assignment(a, self.limits, self.graph)
            if a.engineer_id not in available:
                raise SchemaViolation("engineer_id", f"{a.engineer_id} cannot take work now")
            if a.engineer_id in seen_engineers:
                raise SchemaViolation("engineer_id", f"{a.engineer_id} assigned twice")
            uid = self._unit_for(a)
            unit = self.graph.units[uid]
            if a.file_path is not None and a.file_path != unit.file_path:
                raise SchemaViolation("file_path", f"{uid} lives in {unit.file_path}, not {a.file_path}")
            if uid in seen_units or not is_ready(self.graph, uid):
                raise SchemaViolation("task_id", f"unit {uid} is not ready")
            seen_units.add(uid)
            seen_engineers.add(a.engineer_id)

    def _validate_plan(self, raw: bytes) -> DelegationPlan:
        plan = parse_delegation_plan(raw, self.limits, self.graph)
        self._check_issuable(plan.first_round)
        return plan

    def _validate_assign(self, raw: bytes) -> AssignTask:
        message = decode_assign_task(raw)
        self._check_issuable(message.assignments)
        return message

    @staticmethod
    def _validate_review(raw: bytes) -> str:
        doc = _obj(_load(raw), "", ("review",))
        body = _obj(doc["review"], "review", ("decision",), ("reason",))
        decision = _str(body["decision"], "decision")
        if decision not in ("approve", "reject"):
            raise SchemaViolation("decision", "expected approve or reject")
        return decision

    @staticmethod
    def _validate_final(raw: bytes) -> dict:
        doc = _obj(_load(raw), "", ("final_review",))
        body = _obj(doc["final_review"], "final_review", ("report",), ("request_salvage",))
        salvage = body.get("request_salvage", False)
        if not isinstance(salvage, bool):
            raise SchemaViolation("request_salvage", "expected a boolean")
        return {"report": _str(body["report"], "report"), "request_salvage": salvage}

    def _lint(self, assignments: tuple[Assignment, ...]) -> None:
        busy = [e.assignment for e in self._sorted() if e.assignment is not None]
        regions = shared_write_regions([*busy, *assignments])
        for path, owners in regions.items():
            if not any(a.file_path == path for a in assignments):
                continue
            record = {"file": path, "engineers": owners}
            if record not in self.warnings:
                self.warnings.append(record)
                self._emit("delegation_warning", file=path, engineers=owners, reason="shared write region")

    async def _delegate(self) -> None:
        plan = await self._manager("delegate", self._validate_plan)
        if plan is None:
            return
        self._lint(plan.first_round)
        for a in plan.first_round:
            self._issue(a)
        self._repoll = not plan.first_round

    async def _reassign(self) -> bool:
        self._repoll = False
        if not self._available() or not self.graph.remaining():
            return False
        message = await self._manager("assign", self._validate_assign)
        if message is None:
            return False
        self._lint(message.assignments)
        for a in message.assignments:
            self._issue(a)
        return bool(message.assignments)

    # -- assignment -------------------------------------------------------------

    def _issue(self, a: Assignment) -> None:
        assert self.repo is not None
        e = self.engineers[a.engineer_id]
        uid = self._unit_for(a)
        unit = self.graph.units[uid]
        self._unit_status(uid, UnitStatus.ASSIGNED)
        e.assignment, e.unit_id = a, uid
        e.rounds_used += 1
        e.attempts = e.conflict_cycles = 0
        e.touched, e.feedback, e.conflict_files = [], "", []
        e.task_start = self.clock
        e.resume = EngineerStatus.WORKING
        e.state.current_task = a.task_id
        self._eng_status(e, EngineerStatus.WORKING, task_id=a.task_id)
        self._emit("assign", engineer_id=e.id, task_id=a.task_id, file=unit.file_path, unit_id=uid,
                   functions=list(a.functions_to_implement), round=e.rounds_used)
        e.last_event = "assigned"
        if self.soft:
            if e.worktree is None:
                e.worktree = shared_worktree(self.repo, e.id)
        elif e.worktree is None:
            e.worktree = create_worktree(self.repo, e.id)
            self._emit("worktree", engineer_id=e.id, branch=e.worktree.branch, base=e.worktree.base_commit)
        else:
            sync_worktree(self.repo, e.worktree, SyncMode.PULL_MAIN)
            self._emit("sync", engineer_id=e.id, mode=SyncMode.PULL_MAIN.value, base=e.worktree.base_commit,
                       conflicts=has_conflict_markers(e.worktree))
        self.tracker.enter(e.id, Phase.IMPLEMENT, self.clock, file=unit.file_path, task_id=a.task_id)

    # -- engineer turns ---------------------------------------------------------

    def _engineer_request(self, e: Engineer) -> TurnRequest:
        assert e.assignment is not None and e.unit_id is not None and e.worktree is not None
        unit = self.graph.units[e.unit_id]
        target = e.worktree.path / unit.file_path
        try:
            content = target.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError):
            content = ""
        kind = "resolve" if e.status is EngineerStatus.RESOLVING_CONFLICT else "implement"
        state = {
            "status": e.status.value,
            "task_id": e.assignment.task_id,
            "last_event": e.last_event,
            "attempt": e.attempts,
            "engineer_id": e.id,
            "assignment_json": _json.dumps_line(assignment_to_dict(e.assignment)),
            "file_path": unit.file_path,
            "file_content": content,
            "feedback": e.feedback or "none",
            "conflict_files": ", ".join(e.conflict_files) or "none",
            "restricted": ", ".join(self.config.restricted),
        }
        context = {"role": "context", "content": state["assignment_json"]}
        return TurnRequest(Role.ENGINEER, e.id, kind, (context,), state)

    async def _engineer_step(self, e: Engineer, sem: asyncio.Semaphore) -> tuple[TurnRequest, AgentTurn]:
        async with sem:
            request = self._engineer_request(e)
            turn = await engineer_turn(e.state, request, self.engineer_backend, e.budget,
                                       e.worktree.path if e.worktree else None)
            return request, turn

    async def _tick(self, active: list[Engineer]) -> None:
        sem = asyncio.Semaphore(self.config.n_engineers)
        results = await asyncio.gather(*(self._engineer_step(e, sem) for e in active), return_exceptions=True)
        self.clock += 1
        commits: list[tuple[Engineer, str]] = []
        for e, res in zip(active, results):
            if isinstance(res, BudgetExhausted):
                self._emit("budget_exhausted", engineer_id=e.id, agent_id=e.id)
                self._retire(e, "budget")
                continue
            if isinstance(res, BackendFailure):
                self._emit("backend_failure", engineer_id=e.id, error=str(res), retriable=res.retriable)
                self._retire(e, "backend_failure")
                continue
            if isinstance(res, BaseException):
                raise res
            request, turn = res
            self._record_turn(turn, request.kind, request)
            message = self._apply(e, turn)
            if message is not None:
                commits.append((e, message))
        if commits:
            await self._process_commits(commits)
        if self._repoll and any(e.status is EngineerStatus.IDLE for e in self._sorted()):
            await self._reassign()

    def _apply(self, e: Engineer, turn: AgentTurn) -> str | None:
        """Execute a turn's actions in order; returns a commit message if one was requested."""
        for a in turn.rejected:
            self._emit("confinement_violation", engineer_id=e.id, path=str(a.payload.get("path")))
        edited = False
        commit: str | None = None
        for action in turn.outputs:
            if action.kind is ActionKind.EDIT_FILE:
                edited = self._apply_edit(e, action) or edited
            elif action.kind is ActionKind.RUN_COMMAND:
                self._run_command(e, action.payload["command"])
            elif action.kind is ActionKind.COMMIT_REQUEST:
                commit = str(action.payload.get("message") or f"Implement {e.assignment.task_id}")
        if e.last_event != "edit_failed":
            e.last_event = "edited" if edited else "idle_turn"
        elif edited:
            e.last_event = "edited"
        return commit

    def _apply_edit(self, e: Engineer, action: AgentAction) -> bool:
        assert e.worktree is not None
        rel = action.payload["path"]
        target = e.worktree.path / rel
        whole = "content" in action.payload
        if whole:
            text = action.payload["content"]
        else:
            try:
                current = target.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError):
                current = None
            old = action.payload["old"]
            if current is None or old not in current:
                self._emit("edit_failed", engineer_id=e.id, file=rel, reason="text to replace not found")
                e.last_event = "edit_failed"
                return False
            text = current.replace(old, action.payload["new"], 1)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        if rel not in e.touched:
            e.touched.append(rel)
        self._emit("edit", engineer_id=e.id, task_id=e.assignment.task_id if e.assignment else None, file=rel,
                   mode="write" if whole else "replace")
        for hit in self.detector.on_write(self.clock, e.id, target.resolve(), rel, whole_file=whole):
            self._emit("interference", engineer_id=e.id, file=hit.file, **hit.to_dict())
        return True

    def _run_command(self, e: Engineer, command: str) -> None:
        assert e.worktree is not None
        try:
            proc = subprocess.run(command, shell=True, cwd=e.worktree.path, capture_output=True, text=True,
                                  timeout=self.config.per_run_timeout,
                                  env={**os.environ, "PYTHONDONTWRITEBYTECODE": "1"})
            code = proc.returncode
        except subprocess.TimeoutExpired:
            code = None
        self._emit("command", engineer_id=e.id, command=command, returncode=code)

    # -- verification and commits -------------------------------------------------

    def _changed(self, e: Engineer) -> list[str]:
        assert self.repo is not None and e.worktree is not None
        dirty = status_paths(self.repo.git, e.worktree.path)
        if self.soft:
            return [p for p in e.touched if p in dirty]
        return dirty

    async def _process_commits(self, commits: list[tuple[Engineer, str]]) -> None:
        assert self.scan is not None
        jobs: list[tuple[Engineer, str, list[str], list[str]]] = []
        for e, message in commits:
            changed = self._changed(e)
            if not changed:
                self._emit("commit_rejected", engineer_id=e.id, task_id=e.assignment.task_id, reason="empty")
                e.last_event = "empty_commit"
                continue
            markers = [p for p in has_conflict_markers(e.worktree) if p in changed or not self.soft]
            if markers:
                self._emit("commit_rejected", engineer_id=e.id, task_id=e.assignment.task_id,
                           reason="conflict_markers", files=markers)
                e.last_event = "conflict_markers"
                continue
            e.resume = e.status
            self._eng_status(e, EngineerStatus.VERIFYING, task_id=e.assignment.task_id)
            self.tracker.enter(e.id, Phase.VERIFY, self.clock, file=self.graph.units[e.unit_id].file_path,
                               task_id=e.assignment.task_id)
            for hit in self.detector.on_read(self.clock, e.id, e.worktree.path.resolve(), e.task_start):
                self._emit("interference", engineer_id=e.id, file=hit.file, **hit.to_dict())
            jobs.append((e, message, changed, select_tests(self.scan, changed)))
        if not jobs:
            return
        reports = await asyncio.gather(*(asyncio.to_thread(self._verify, e, tests) for e, _, _, tests in jobs))
        self.clock += 1
        for (e, message, changed, _), report in zip(jobs, reports):
            await self._gate_and_commit(e, message, changed, report)

    def _verify(self, e: Engineer, tests: list[str]) -> VerificationReport:
        assert e.worktree is not None
        try:
            return run_verification(e.worktree, self.policy, tests)
        except VerificationTimeout as exc:
            return VerificationReport(selected_tests=list(tests), errored=1, log_excerpt=str(exc))

    def _back_to_work(self, e: Engineer, last_event: str) -> None:
        self._eng_status(e, e.resume, task_id=e.assignment.task_id)
        phase = Phase.CONFLICT_RESOLVE if e.resume is EngineerStatus.RESOLVING_CONFLICT else Phase.IMPLEMENT
        self.tracker.enter(e.id, phase, self.clock, file=self.graph.units[e.unit_id].file_path,
                           task_id=e.assignment.task_id)
        e.last_event = last_event

    @staticmethod
    def _counts(report: VerificationReport) -> dict:
        return {"passed": report.passed, "failed": report.failed, "errored": report.errored}

    async def _gate_and_commit(self, e: Engineer, message: str, changed: list[str], report: VerificationReport) -> None:
        assert self.repo is not None and e.assignment is not None and e.unit_id is not None
        task = e.assignment.task_id
        e.attempts += 1
        decision = gate_commit(report, self.policy, e.attempts)
        self._emit("verify", engineer_id=e.id, task_id=task, attempt=e.attempts, tests=len(report.selected_tests),
                   decision=decision.value, **self._counts(report))
        if decision is GateDecision.RETRY:
            e.feedback = report.log_excerpt[-2000:]
            self._back_to_work(e, "verify_failed")
            return
        if decision is GateDecision.ESCALATE:
            self._emit("escalate", engineer_id=e.id, task_id=task, attempts=e.attempts)
            self.unresolved.append(UnresolvedError(task, f"verification failed {e.attempts} times"))
            self._discard(e)
            self._unit_status(e.unit_id, UnitStatus.PENDING)
            self._finish_task(e, "escalated")
            return
        try:
            if self.soft:
                record = commit_shared(self.repo, e.id, task, changed, message)
            else:
                record = commit_worktree(self.repo, e.worktree, task, message)
        except RestrictedFileChanged as exc:
            self._emit("commit_rejected", engineer_id=e.id, task_id=task, reason="restricted", files=exc.paths)
            self._back_to_work(e, "restricted_violation")
            return
        except EmptyCommit:
            self._emit("commit_rejected", engineer_id=e.id, task_id=task, reason="empty")
            self._back_to_work(e, "empty_commit")
            return
        self.detector.on_settled(e.id, [(e.worktree.path / p).resolve() for p in record.changed_files])
        self._emit("commit", engineer_id=e.id, task_id=task, commit=record.commit_id, files=record.changed_files,
                   verified=self._counts(report))
        self._unit_status(e.unit_id, UnitStatus.COMPLETED)
        signal = CompletionSignal(e.id, task, Outcome.COMMITTED, record.commit_id, self._counts(report))
        await self.on_completion(signal, report)

    async def on_completion(self, signal: CompletionSignal, report: VerificationReport) -> list[str]:
        """Review (if the policy asks), merge, and update the graph. Returns the steps taken."""
        assert self.repo is not None
        e = self.engineers[signal.engineer_id]
        uid = e.unit_id
        assert uid is not None and e.assignment is not None
        steps: list[str] = []
        self._emit("completion", engineer_id=e.id, task_id=signal.task_id, outcome=signal.outcome.value,
                   commit=signal.commit_id)
        if self.policy.needs_manager_review:
            verdict = await self._manager("review", self._validate_review, task_id=signal.task_id,
                                          report=self._counts(report), report_json=_json.dumps_line(self._counts(report)))
            if verdict is None:
                verdict = "approve" if report.clean else "reject"
            self._emit("review", engineer_id=e.id, task_id=signal.task_id, decision=verdict)
            steps.append(f"review:{verdict}")
            if verdict == "reject":
                self._unit_status(uid, UnitStatus.ASSIGNED)
                e.feedback = "the manager rejected this change"
                self._back_to_work(e, "review_rejected")
                return steps
        if not self.soft:
            start = self.clock
            outcome = merge_into_main(self.repo, e.worktree)
            self.clock += 1
            self.tracker.bar(MANAGER, Phase.MERGE, start, self.clock, file=self.graph.units[uid].file_path,
                             task_id=signal.task_id)
            self._emit("merge", engineer_id=e.id, task_id=signal.task_id, status=outcome.status.value,
                       commit=outcome.merge_commit, conflicts=outcome.conflicting_files,
                       verified=dict(signal.verification or {}))
            steps.append(f"merge:{outcome.status.value}")
            if outcome.status is MergeStatus.CONFLICT:
                self._on_conflict(e, outcome.conflicting_files)
                steps.append("conflict")
                return steps
        self._unit_status(uid, UnitStatus.INTEGRATED)
        self.graph.round += 1
        self._finish_task(e, "merged")
        steps.append("integrated")
        return steps

    def _on_conflict(self, e: Engineer, files: list[str]) -> None:
        assert self.repo is not None and e.unit_id is not None
        e.conflict_cycles += 1
        self._emit("conflict", engineer_id=e.id, task_id=e.assignment.task_id, files=files, cycle=e.conflict_cycles)
        self._unit_status(e.unit_id, UnitStatus.ASSIGNED)
        if e.conflict_cycles > self.config.conflict_retry_cap:
            self._retire(e, "conflict_cap")
            return
        e.resume = EngineerStatus.RESOLVING_CONFLICT
        sync_worktree(self.repo, e.worktree, SyncMode.PULL_MAIN)
        e.conflict_files = has_conflict_markers(e.worktree)
        self._emit("sync", engineer_id=e.id, mode=SyncMode.PULL_MAIN.value, base=e.worktree.base_commit,
                   conflicts=e.conflict_files)
        e.attempts = 0
        e.feedback = "merge conflict in " + ", ".join(files)
        self._back_to_work(e, "conflict")

    def _finish_task(self, e: Engineer, last_event: str) -> None:
        e.assignment, e.unit_id = None, None
        e.touched = []
        self._eng_status(e, EngineerStatus.IDLE)
        self.tracker.enter(e.id, Phase.IDLE, self.clock)
        e.last_event = last_event
        self._repoll = True

    def _discard(self, e: Engineer) -> None:
        """Throw away an engineer's uncommitted work."""
        assert self.repo is not None and e.worktree is not None
        if self.soft:
            git, root = self.repo.git, self.repo.root
            tracked = set(git.run(["ls-files"], root).stdout.splitlines())
            for p in e.touched:
                if p in tracked:
                    git.run(["checkout", "HEAD", "--", p], root)
                elif (root / p).exists():
                    (root / p).unlink()
        else:
            sync_worktree(self.repo, e.worktree, SyncMode.HARD_RESET)
        self.detector.on_settled(e.id)

    # -- retirement and salvage -------------------------------------------------

    def _retire(self, e: Engineer, reason: str) -> None:
        uid = e.unit_id
        task = e.assignment.task_id if e.assignment else None
        e.retire_reason = reason
        self._eng_status(e, EngineerStatus.RETIRED, reason=reason)
        self.tracker.close(e.id, self.clock)
        if uid is not None and task is not None:
            if reason in ("budget", "backend_failure"):
                self._salvage(e, task)
            elif e.worktree is not None and not self.soft:
                sync_worktree(self.repo, e.worktree, SyncMode.HARD_RESET)
            self._unit_status(uid, UnitStatus.PENDING)
            self.unresolved.append(UnresolvedError(task, f"{e.id} retired ({reason})"))
        e.assignment, e.unit_id = None, None
        self._repoll = True

    def _salvage(self, e: Engineer, task: str) -> None:
        assert self.repo is not None and self.scan is not None
        if e.worktree is None:
            return
        if self.soft:
            paths = [p for p in e.touched if p in set(status_paths(self.repo.git, self.repo.root))
                     and not self.repo.is_restricted(p)]
            report = self._verify(e, select_tests(self.scan, paths)) if paths else None
            decision = gate_commit(report, self.policy, self.policy.retry_budget) if report else None
            if report is not None:
                self._emit("verify", engineer_id=e.id, task_id=task, attempt=0, tests=len(report.selected_tests),
                           decision=decision.value, salvage=True, **self._counts(report))
            record = None
            if decision is GateDecision.ALLOW:
                record = commit_shared(self.repo, MANAGER, task, paths, f"[salvage] partial work on {task}")
                self.detector.on_settled(e.id)
            self._emit("salvage", engineer_id=e.id, task_id=task, commit=record.commit_id if record else None,
                       files=paths, **({"verified": self._counts(report)} if report else {}))
            if record is None:
                self._discard(e)
            return
        if has_conflict_markers(e.worktree):
            # a half-resolved merge is not worth keeping
            sync_worktree(self.repo, e.worktree, SyncMode.HARD_RESET)
            self.detector.on_settled(e.id)
            self._emit("salvage", engineer_id=e.id, task_id=task, commit=None, files=[], reason="conflict_markers")
            return
        record = salvage_worktree(self.repo, e.worktree, task)
        self.detector.on_settled(e.id)
        self._emit("salvage", engineer_id=e.id, task_id=task, commit=record.commit_id if record else None,
                   files=record.changed_files if record else [])
        if record is None:
            return
        report = self._verify(e, select_tests(self.scan, record.changed_files))
        decision = gate_commit(report, self.policy, self.policy.retry_budget)
        self._emit("verify", engineer_id=e.id, task_id=task, attempt=0, tests=len(report.selected_tests),
                   decision=decision.value, salvage=True, **self._counts(report))
        if decision is not GateDecision.ALLOW:
            return
        start = self.clock
        outcome = merge_into_main(self.repo, e.worktree)
        self.clock += 1
        self.tracker.bar(MANAGER, Phase.MERGE, start, self.clock, task_id=task)
        self._emit("merge", engineer_id=e.id, task_id=task, status=outcome.status.value, commit=outcome.merge_commit,
                   conflicts=outcome.conflicting_files, verified=self._counts(report), salvage=True)

    # -- main loop --------------------------------------------------------------

    def _sweep(self) -> None:
        for e in self._sorted():
            if e.status is EngineerStatus.IDLE and e.budget.remaining <= 0:
                self._retire(e, "budget")

    async def _loop(self) -> TerminationReason:
        while True:
            self._sweep()
            reason = terminate_check(self.loop_state())
            if reason is not None:
                return reason
            active = self._active()
            if active:
                await self._tick(active)
                continue
            if self._repoll and await self._reassign():
                continue
            reason = terminate_check(self.loop_state())
            if reason is not None:
                return reason
            return TerminationReason(TerminationKind.FATAL_ERROR, tuple(self.graph.remaining()),
                                     "manager left ready work unassigned")

    async def _final_review(self) -> None:
        candidates = [
            e.id for e in self._sorted()
            if e.worktree is not None and not e.worktree.shared and e.worktree.active
            and any(not self.repo.is_restricted(p) for p in status_paths(self.repo.git, e.worktree.path))
        ]
        verdict = await self._manager("final_review", self._validate_final,
                                      remaining_units=self.graph.remaining(), salvage_candidates=candidates)
        if verdict is None:
            return
        self._emit("final_review", report=verdict["report"], request_salvage=verdict["request_salvage"])
        if verdict["request_salvage"]:
            for eid in candidates:
                self._salvage(self.engineers[eid], f"final-{eid}")

    def _score(self) -> float | None:
        assert self.repo is not None
        if self.soft:
            self.repo.git.run(["reset", "-q", "--hard", "HEAD"], self.repo.root)
            self.repo.git.run(["clean", "-q", "-fd"], self.repo.root)
        report = run_verification(shared_worktree(self.repo, MANAGER), self.policy, [DEFAULT_SUITE])
        score = report.passed / report.executed if report.executed else None
        self._emit("score", score=score, **self._counts(report))
        return score

    def _teardown(self) -> None:
        if self.repo is None:
            return
        for e in self._sorted():
            if e.worktree is not None and not e.worktree.shared and e.worktree.active:
                remove_worktree(self.repo, e.worktree)
        self._emit("cleanup", main=self.repo.refresh_head())

    async def run_async(self) -> RunResult:
        cfg = self.config
        self._emit("run_start", n_engineers=cfg.n_engineers, isolation=cfg.isolation, seed=cfg.seed,
                   verification_mode=cfg.verification_mode, max_rounds=cfg.max_rounds)
        score: float | None = None
        try:
            self._setup()
            await self._delegate()
            reason = await self._loop()
            if reason.kind is not TerminationKind.FATAL_ERROR:
                await self._final_review()
        except (BranchMergeError, OSError) as exc:
            self._emit("fatal", error=f"{type(exc).__name__}: {exc}")
            reason = TerminationReason(TerminationKind.FATAL_ERROR, tuple(self.graph.remaining()), type(exc).__name__)
        self.tracker.close_all(self.clock)
        try:
            if self.repo is not None:
                score = self._score()
                self._teardown()
        except (BranchMergeError, OSError) as exc:
            self._emit("fatal", error=f"{type(exc).__name__}: {exc}")
        self._emit("termination", reason=reason.kind.value, remaining_units=list(reason.remaining_units),
                   detail=reason.detail)
        metrics = compute_metrics(self.log.timeline, self.turns, score)
        return RunResult(
            reason=reason,
            metrics=metrics,
            log=self.log,
            config=cfg,
            interference=list(self.detector.events),
            delegation_warnings=list(self.warnings),
            turns=list(self.turns),
            graph=self.graph,
            repo_root=self.repo.root if self.repo else None,
            git_calls=list(self.repo.git.calls) if self.repo else [],
        )


def make_backend(config: RunConfig, traces: Mapping[str, Any] | None = None,
                 audit_dir: str | Path | None = None) -> Backend:
    """Backend for both roles as selected by ``config.backend``."""
    if config.backend == "scripted":
        doc = traces
        if doc is None and config.traces:
            try:
                doc = _json_load(Path(config.traces))
            except (OSError, ValueError) as exc:
                raise ScenarioError(f"cannot read traces {config.traces}: {exc}") from exc
        return ScriptedBackend(load_traces(doc or {}), fallback=PlannerBackend())
    remote = RemoteConfig(
        base_url=config.remote_base_url,
        model=config.remote_model,
        api_key_env=config.remote_api_key_env,
        timeout=config.remote_timeout,
        price_per_1k_input=config.remote_price_in,
        price_per_1k_output=config.remote_price_out,
        seed=config.seed,
    )
    prompts = PromptBook.from_dir(config.templates_dir) if config.templates_dir else None
    audit = JsonLines(Path(audit_dir) / "remote.jsonl") if audit_dir else None
    return remote_backend(remote, prompts, record_to=config.remote_record, replay_from=config.remote_replay,
                          audit=audit)


def _json_load(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def run(
    config: RunConfig,
    source: str | Path,
    workdir: str | Path,
    *,
    backend: Backend | None = None,
    traces: Mapping[str, Any] | None = None,
    log_stream: TextIO | None = None,
    audit_dir: str | Path | None = None,
) -> RunResult:
    """Execute one coordinated run to termination."""
    backend = backend or make_backend(config, traces, audit_dir)
    coordinator = Coordinator(config, source, workdir, backend, log_stream=log_stream, audit_dir=audit_dir)
    return asyncio.run(coordinator.run_async())
