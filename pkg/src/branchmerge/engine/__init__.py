"""Coordination loop, run configuration and interference detection."""

from branchmerge.engine.config import RunConfig, build_config
from branchmerge.engine.coordinator import (
    Coordinator,
    LoopState,
    RunResult,
    TerminationKind,
    TerminationReason,
    make_backend,
    run,
    terminate_check,
)
from branchmerge.engine.interference import InterferenceDetector, InterferenceEvent, InterferenceKind

__all__ = [
    "Coordinator",
    "InterferenceDetector",
    "InterferenceEvent",
    "InterferenceKind",
    "LoopState",
    "RunConfig",
    "RunResult",
    "TerminationKind",
    "TerminationReason",
    "build_config",
    "make_backend",
    "run",
    "terminate_check",
]
