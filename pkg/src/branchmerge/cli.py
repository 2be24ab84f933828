"""Command-line entry point: ``branchmerge {run,simulate,report,validate}``.

Exit codes: ``run`` passes through the engine's code (0 completed, 3 a budget
or round limit, 1 fatal). ``simulate`` returns 0 when every expectation holds
and 4 otherwise. Any configuration, scenario or log error exits with 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from branchmerge import __version__
from branchmerge.engine.config import (
    BACKENDS,
    ISOLATION_MODES,
    RunConfig,
    build_config,
    load_config_file,
    parse_override,
)
from branchmerge.engine.coordinator import make_backend
from branchmerge.errors import BranchMergeError, ConfigError, CorruptLog, ScenarioError
from branchmerge.runner import execute, report
from branchmerge.scenarios import bundled_names, load_scenario, simulate

EXIT_EXPECTATION_FAILED = 4
EXIT_USAGE = 2

# flag dest -> config key
_FLAG_KEYS = {
    "backend": "backend",
    "n_engineers": "n_engineers",
    "isolation": "isolation",
    "rounds": "max_rounds",
    "seed": "seed",
    "traces": "traces",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or key = value configuration file")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--n-engineers", type=int, dest="n_engineers")
    p.add_argument("--isolation", choices=ISOLATION_MODES)
    p.add_argument("--rounds", type=int, help="maximum assignments per engineer")
    p.add_argument("--seed", type=int)
    p.add_argument("--traces", help="scripted trace file (JSON object keyed by agent id)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override any configuration key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchmerge", description="Coordinate agents on git worktrees.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="execute a coordinated build on a repository")
    _add_config_flags(p)
    p.add_argument("--repo", type=Path, required=True, help="source repository (copied, never modified)")
    p.add_argument("--out", type=Path, default=Path("branchmerge-out"))

    p = sub.add_parser("simulate", help="run a scenario under each isolation mode and compare")
    p.add_argument("scenario", nargs="?", help="scenario file or bundled scenario name")
    p.add_argument("--mode", action="append", choices=ISOLATION_MODES, help="restrict to these modes")
    p.add_argument("--out", type=Path, default=Path("branchmerge-sim"))
    p.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")

    p = sub.add_parser("report", help="rebuild the Gantt export and metrics from an event log")
    p.add_argument("log", type=Path)
    p.add_argument("--out", type=Path, help="write gantt.json and metrics.json here")

    p = sub.add_parser("validate", help="parse configuration, scenario and trace files without running")
    _add_config_flags(p)
    p.add_argument("--scenario", action="append", default=[])
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then dedicated flags, then ``--set`` overrides."""
    base: dict[str, Any] = load_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    sets = dict(parse_override(item) for item in args.overrides)
    for key in base:
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(key, "unknown configuration key")
    return build_config(base, {**flags, **sets})


def _print(doc: Any) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_run(args: argparse.Namespace) -> int:
    config = effective_config(args)
    if not args.repo.is_dir():
        raise ConfigError("repo", f"not a directory: {args.repo}")
    result = execute(config, args.repo, args.out)
    _print({
        "termination": result.reason.kind.value,
        "remaining_units": list(result.reason.remaining_units),
        "metrics": result.metrics.to_dict(),
        "out": str(args.out),
    })
    return result.exit_code


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.list:
        for name in bundled_names():
            print(name)
        return 0
    if not args.scenario:
        raise ScenarioError("no scenario given")
    scenario = load_scenario(args.scenario)
    overrides = dict(parse_override(item) for item in args.overrides)
    outcome = simulate(scenario, args.out, modes=args.mode, overrides=overrides)
    for mode, body in outcome["modes"].items():
        status = "ok" if not body["expectation_failures"] else "FAILED: " + "; ".join(body["expectation_failures"])
        print(f"{scenario.name} [{mode}] termination={body['termination']} "
              f"interference={body['interference']} conflicts={body['conflicts']} {status}")
    return 0 if outcome["passed"] else EXIT_EXPECTATION_FAILED


def cmd_report(args: argparse.Namespace) -> int:
    gantt, metrics = report(args.log, args.out)
    _print({"bars": len(gantt["bars"]), "actors": gantt["actors"], "metrics": metrics.to_dict()})
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    config = effective_config(args)
    checked = ["config"]
    if config.traces and config.backend == "scripted":
        make_backend(config)
        checked.append(f"traces {config.traces}")
    for path in args.scenario:
        load_scenario(path)
        checked.append(f"scenario {path}")
    print("valid: " + ", ".join(checked))
    return 0


_COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "report": cmd_report, "validate": cmd_validate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, ScenarioError, CorruptLog) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BranchMergeError as exc:
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
