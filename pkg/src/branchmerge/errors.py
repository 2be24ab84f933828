"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations

from collections.abc import Iterable


class BranchMergeError(Exception):
    """Base class for all engine errors."""


# -- dependency graph ---------------------------------------------------------


class GraphError(BranchMergeError):
    pass


class UnknownUnit(GraphError):
    def __init__(self, unit_id: str) -> None:
        super().__init__(f"unknown unit: {unit_id!r}")
        self.unit_id = unit_id


class DuplicateUnit(GraphError):
    def __init__(self, unit_id: str) -> None:
        super().__init__(f"duplicate unit: {unit_id!r}")
        self.unit_id = unit_id


class InvalidTransition(GraphError):
    def __init__(self, unit_id: str, current: str, target: str) -> None:
        super().__init__(f"unit {unit_id!r}: cannot move {current} -> {target}")
        self.unit_id = unit_id
        self.current = current
        self.target = target


# -- ingestion ----------------------------------------------------------------


class IoFailure(BranchMergeError):
    pass


# -- protocol -----------------------------------------------------------------


class ProtocolError(BranchMergeError):
    """Raised for any message that fails to parse or validate."""


class MalformedJson(ProtocolError):
    pass


class SchemaViolation(ProtocolError):
    def __init__(self, field: str, reason: str = "") -> None:
        msg = f"schema violation at {field!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.field = field
        self.reason = reason


class OverlappingFunctions(ProtocolError):
    def __init__(self, file: str, names: Iterable[str]) -> None:
        self.file = file
        self.names = sorted(names)
        super().__init__(f"overlapping functions in {file!r}: {', '.join(self.names)}")


class RestrictedFileAssignment(ProtocolError):
    def __init__(self, path: str) -> None:
        super().__init__(f"restricted file assigned to an engineer: {path!r}")
        self.path = path


class UnknownEngineer(ProtocolError):
    def __init__(self, engineer_id: str) -> None:
        super().__init__(f"unknown engineer: {engineer_id!r}")
        self.engineer_id = engineer_id


class UnknownFile(SchemaViolation):
    def __init__(self, path: str) -> None:
        super().__init__("file_path", f"not present in the dependency graph: {path!r}")
        self.path = path


# -- workspace ----------------------------------------------------------------


class WorkspaceError(BranchMergeError):
    pass


class VcsFailure(WorkspaceError):
    def __init__(self, message: str, *, args: list[str] | None = None, output: str = "") -> None:
        super().__init__(message)
        self.command = args or []
        self.output = output


class DirtyTree(WorkspaceError):
    pass


class WorktreeExists(WorkspaceError):
    def __init__(self, engineer_id: str) -> None:
        super().__init__(f"engineer {engineer_id!r} already has an active worktree")
        self.engineer_id = engineer_id


class RestrictedFileChanged(WorkspaceError):
    def __init__(self, paths: Iterable[str]) -> None:
        self.paths = sorted(paths)
        super().__init__(f"commit touches restricted files: {', '.join(self.paths)}")


class EmptyCommit(WorkspaceError):
    pass


# -- verification -------------------------------------------------------------


class VerificationError(BranchMergeError):
    pass


class VerificationTimeout(VerificationError):
    def __init__(self, seconds: float) -> None:
        super().__init__(f"verification exceeded {seconds}s")
        self.seconds = seconds


class CommandFailure(VerificationError):
    pass


# -- agents -------------------------------------------------------------------


class BudgetExhausted(BranchMergeError):
    def __init__(self, agent_id: str) -> None:
        super().__init__(f"{agent_id} has no iterations left")
        self.agent_id = agent_id


class BackendFailure(BranchMergeError):
    def __init__(self, message: str, *, retriable: bool = False) -> None:
        super().__init__(message)
        self.retriable = retriable


# -- engine, telemetry, cli ---------------------------------------------------


class FatalError(BranchMergeError):
    pass


class MissingScore(BranchMergeError):
    pass


class ConfigError(BranchMergeError):
    def __init__(self, key: str, reason: str) -> None:
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key


class ScenarioError(BranchMergeError):
    pass


class CorruptLog(BranchMergeError):
    pass
