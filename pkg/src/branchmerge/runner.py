"""Execute a run into the fixed output-directory layout.

``out/config.echo.json`` is written before anything runs, then
``events.jsonl`` streams during the run, and ``gantt.json``,
``metrics.json`` and ``audit/`` are written at the end.
"""

from __future__ import annotations

import shutil
import tempfile
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from branchmerge import _json
from branchmerge.agents.base import Backend
from branchmerge.engine.config import RunConfig
from branchmerge.engine.coordinator import RunResult, run
from branchmerge.telemetry import (
    RunMetrics,
    export_gantt,
    metrics_from_log,
    read_log,
    timeline_from_log,
    validate_gantt,
)

CONFIG_ECHO = "config.echo.json"
EVENTS = "events.jsonl"
GANTT = "gantt.json"
METRICS = "metrics.json"
AUDIT = "audit"


def write_json(path: Path, doc: Any) -> None:
    path.write_bytes(_json.dumps(doc))


def execute(
    config: RunConfig,
    source: str | Path,
    out: str | Path,
    *,
    traces: Mapping[str, Any] | None = None,
    backend: Backend | None = None,
    keep_workdir: bool = False,
) -> RunResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / CONFIG_ECHO, config.to_dict())
    audit = out / AUDIT
    if audit.exists():
        shutil.rmtree(audit)
    audit.mkdir()
    workdir = Path(tempfile.mkdtemp(prefix="branchmerge-"))
    try:
        with (out / EVENTS).open("w", encoding="utf-8") as stream:
            result = run(config, source, workdir, backend=backend, traces=traces, log_stream=stream, audit_dir=audit)
    finally:
        if not keep_workdir:
            shutil.rmtree(workdir, ignore_errors=True)
    gantt = result.gantt()
    validate_gantt(gantt)
    write_json(out / GANTT, gantt)
    write_json(out / METRICS, result.metrics.to_dict())
    with (audit / "git.jsonl").open("w", encoding="utf-8") as fh:
        for call in result.git_calls:
            fh.write(_json.dumps_line(call) + "\n")
    return result


def report(log_path: str | Path, out: str | Path | None = None) -> tuple[dict, RunMetrics]:
    """Rebuild the Gantt export and metrics from an event log alone."""
    events = read_log(log_path)
    actors = {e.engineer_id for e in events if e.engineer_id}
    starts = [e for e in events if e.kind == "run_start"]
    if starts:
        n = starts[0].detail.get("n_engineers", 0)
        actors |= {f"engineer-{i}" for i in range(1, n + 1)}
        actors.add("manager")
    gantt = export_gantt(timeline_from_log(events), sorted(actors))
    validate_gantt(gantt)
    metrics = metrics_from_log(events)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / GANTT, gantt)
        write_json(out / METRICS, metrics.to_dict())
    return gantt, metrics
