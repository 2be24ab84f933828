"""Manager and engineer agents and their backends."""

from branchmerge.agents.base import (
    ActionKind,
    AgentAction,
    AgentTurn,
    Backend,
    BackendReply,
    Budget,
    EngineerState,
    EngineerStatus,
    Role,
    TurnRequest,
    engineer_turn,
    is_confined,
    manager_turn,
)
from branchmerge.agents.context import CondensedHistory, PromptBook, SummaryRecord, condense_history
from branchmerge.agents.planner import PlannerBackend
from branchmerge.agents.remote import RemoteBackend, RemoteConfig, remote_backend
from branchmerge.agents.scripted import ScriptedBackend, ScriptedTrace, TraceStep

__all__ = [
    "ActionKind",
    "AgentAction",
    "AgentTurn",
    "Backend",
    "BackendReply",
    "Budget",
    "CondensedHistory",
    "EngineerState",
    "EngineerStatus",
    "PlannerBackend",
    "PromptBook",
    "RemoteBackend",
    "RemoteConfig",
    "Role",
    "ScriptedBackend",
    "ScriptedTrace",
    "SummaryRecord",
    "TraceStep",
    "TurnRequest",
    "condense_history",
    "engineer_turn",
    "is_confined",
    "manager_turn",
    "remote_backend",
]
