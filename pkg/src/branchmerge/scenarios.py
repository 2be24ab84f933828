"""Scenario files: a small inline repository, a config, traces and expectations.

A scenario runs once per listed isolation mode; the comparison report lists
each mode's outcome next to the expectations it was checked against.
"""

from __future__ import annotations

import json
import tempfile
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from branchmerge.engine.config import ISOLATION_MODES, RunConfig, build_config
from branchmerge.engine.coordinator import RunResult
from branchmerge.errors import ConfigError, ScenarioError
from branchmerge.agents.scripted import load_traces
from branchmerge.runner import execute, write_json
from branchmerge.telemetry import LogEvent

_TOP_KEYS = {"name", "description", "repo", "config", "modes", "traces", "expect"}
EXPECT_KEYS = {
    "termination",
    "remaining_units",
    "interference_min",
    "interference_max",
    "concurrent_write_min",
    "concurrent_write_max",
    "delegation_warnings_min",
    "conflicts",
    "conflicts_min",
    "salvage_commits_min",
    "score_min",
    "resolving_cycles",
}


@dataclass(frozen=True)
class Scenario:
    name: str
    repo: Mapping[str, str]
    config: Mapping[str, Any] = field(default_factory=dict)
    modes: tuple[str, ...] = ("worktree", "soft")
    traces: Mapping[str, Any] = field(default_factory=dict)
    expect: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    description: str = ""

    def run_config(self, mode: str, overrides: Mapping[str, Any] | None = None) -> RunConfig:
        return build_config(dict(self.config), {**(overrides or {}), "isolation": mode})

    def expectations(self, mode: str) -> dict[str, Any]:
        return {**self.expect.get("all", {}), **self.expect.get(mode, {})}

    def materialize(self, dest: str | Path) -> Path:
        dest = Path(dest)
        for rel, text in sorted(self.repo.items()):
            target = dest / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        return dest


def parse_scenario(doc: Any, *, label: str = "scenario") -> Scenario:
    if not isinstance(doc, dict) or not doc:
        raise ScenarioError(f"{label}: empty or not a JSON object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise ScenarioError(f"{label}: unknown keys {sorted(extra)}")
    repo = doc.get("repo")
    if not isinstance(repo, dict) or not repo or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in repo.items()
    ):
        raise ScenarioError(f"{label}: 'repo' must map relative paths to file contents")
    for rel in repo:
        if rel.startswith("/") or ".." in Path(rel).parts:
            raise ScenarioError(f"{label}: repo path escapes the scenario: {rel!r}")
    modes = doc.get("modes", ["worktree", "soft"])
    if not isinstance(modes, list) or not modes or any(m not in ISOLATION_MODES for m in modes):
        raise ScenarioError(f"{label}: 'modes' must be a non-empty subset of {ISOLATION_MODES}")
    expect = doc.get("expect", {})
    if not isinstance(expect, dict):
        raise ScenarioError(f"{label}: 'expect' must be an object")
    for scope, body in expect.items():
        if scope not in ("all", *ISOLATION_MODES) or not isinstance(body, dict):
            raise ScenarioError(f"{label}: bad expectation scope {scope!r}")
        unknown = set(body) - EXPECT_KEYS
        if unknown:
            raise ScenarioError(f"{label}: unknown expectation keys {sorted(unknown)}")
    config = doc.get("config", {})
    if not isinstance(config, dict):
        raise ScenarioError(f"{label}: 'config' must be an object")
    scenario = Scenario(
        name=str(doc.get("name", label)),
        description=str(doc.get("description", "")),
        repo=repo,
        config=config,
        modes=tuple(modes),
        traces=doc.get("traces", {}),
        expect=expect,
    )
    try:
        for mode in scenario.modes:
            scenario.run_config(mode)
        load_traces(scenario.traces)
    except ConfigError as exc:
        raise ScenarioError(f"{label}: {exc}") from exc
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.is_file() and not path.suffix:
        bundled = bundled_path(path.name)
        if bundled is not None:
            path = bundled
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    if not text.strip():
        raise ScenarioError(f"{path}: scenario file is empty")
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc
    return parse_scenario(doc, label=path.stem)


def bundled_names() -> list[str]:
    root = resources.files("branchmerge") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str) -> Path | None:
    p = Path(str(resources.files("branchmerge") / "scenarios" / f"{name}.json"))
    return p if p.is_file() else None


# -- outcomes -----------------------------------------------------------------


def _count(events: Iterable[LogEvent], kind: str, **match: Any) -> int:
    return sum(1 for e in events if e.kind == kind and all(e.detail.get(k) == v for k, v in match.items()))


def summarize(result: RunResult) -> dict:
    events = result.log.events
    inter = {"concurrent_write": 0, "stale_read": 0, "overwrite": 0}
    for e in result.interference:
        inter[e.kind.value] += 1
    return {
        "termination": result.reason.kind.value,
        "remaining_units": list(result.reason.remaining_units),
        "interference": sum(inter.values()),
        "interference_by_kind": inter,
        "delegation_warnings": len(result.delegation_warnings),
        "warned_files": sorted({w["file"] for w in result.delegation_warnings}),
        "merges": _count(events, "merge", status="merged"),
        "conflicts": _count(events, "merge", status="conflict"),
        "resolving_cycles": sum(
            1 for e in events if e.kind == "engineer_status" and e.detail.get("to") == "resolving_conflict"
        ),
        "salvage_commits": sum(1 for e in events if e.kind == "salvage" and e.detail.get("commit")),
        "score": result.metrics.score,
        "metrics": result.metrics.to_dict(),
    }


def check(summary: Mapping[str, Any], expect: Mapping[str, Any]) -> list[str]:
    """Human-readable list of unmet expectations (empty when all hold)."""
    failures = []

    def need(ok: bool, what: str) -> None:
        if not ok:
            failures.append(what)

    for key, want in sorted(expect.items()):
        if key == "termination":
            need(summary["termination"] == want, f"termination {summary['termination']} != {want}")
        elif key == "remaining_units":
            need(summary["remaining_units"] == sorted(want), f"remaining {summary['remaining_units']} != {want}")
        elif key == "interference_min":
            need(summary["interference"] >= want, f"interference {summary['interference']} < {want}")
        elif key == "interference_max":
            need(summary["interference"] <= want, f"interference {summary['interference']} > {want}")
        elif key == "concurrent_write_min":
            got = summary["interference_by_kind"]["concurrent_write"]
            need(got >= want, f"concurrent_write {got} < {want}")
        elif key == "concurrent_write_max":
            got = summary["interference_by_kind"]["concurrent_write"]
            need(got <= want, f"concurrent_write {got} > {want}")
        elif key == "delegation_warnings_min":
            need(summary["delegation_warnings"] >= want, f"delegation warnings {summary['delegation_warnings']} < {want}")
        elif key == "conflicts":
            need(summary["conflicts"] == want, f"conflicts {summary['conflicts']} != {want}")
        elif key == "conflicts_min":
            need(summary["conflicts"] >= want, f"conflicts {summary['conflicts']} < {want}")
        elif key == "resolving_cycles":
            need(summary["resolving_cycles"] == want, f"resolving cycles {summary['resolving_cycles']} != {want}")
        elif key == "salvage_commits_min":
            need(summary["salvage_commits"] >= want, f"salvage commits {summary['salvage_commits']} < {want}")
        elif key == "score_min":
            score = summary["score"]
            need(score is not None and score >= want, f"score {score} < {want}")
    return failures


def simulate(
    scenario: Scenario,
    out: str | Path | None = None,
    *,
    modes: Sequence[str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> dict:
    """Run ``scenario`` once per mode and compare against its expectations."""
    modes = tuple(modes or scenario.modes)
    report: dict[str, Any] = {"scenario": scenario.name, "modes": {}, "passed": True}
    with tempfile.TemporaryDirectory(prefix="scenario-") as tmp:
        source = scenario.materialize(Path(tmp) / "source")
        for mode in modes:
            config = scenario.run_config(mode, overrides)
            target = Path(out) / mode if out is not None else Path(tmp) / "out" / mode
            result = execute(config, source, target, traces=scenario.traces)
            summary = summarize(result)
            failures = check(summary, scenario.expectations(mode))
            report["modes"][mode] = {**summary, "expectation_failures": failures, "exit_code": result.exit_code}
            report["passed"] = report["passed"] and not failures
    if out is not None:
        write_json(Path(out) / "comparison.json", report)
    return report
