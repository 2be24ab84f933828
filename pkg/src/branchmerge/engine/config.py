"""Run configuration: a flat key set, loadable from JSON or ``key = value`` text."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from branchmerge.errors import ConfigError
from branchmerge.ingestion import DEFAULT_RESTRICTED
from branchmerge.verification import DEFAULT_TEST_COMMAND, PolicyMode, VerificationPolicy

ISOLATION_MODES = ("worktree", "soft")
GRANULARITIES = ("file", "function")
BACKENDS = ("scripted", "remote")


@dataclass(frozen=True)
class RunConfig:
    n_engineers: int = 2
    manager_max_iterations: int = 50
    engineer_max_iterations: int = 80
    max_rounds: int = 2
    isolation: str = "worktree"
    verification_mode: str = PolicyMode.ENGINEER_SELF_VERIFICATION.value
    test_command: str = DEFAULT_TEST_COMMAND
    entry_command: str | None = None
    per_run_timeout: float = 120.0
    retry_budget: int = 3
    conflict_retry_cap: int = 2
    condensation_window: int = 10
    seed: int = 0
    granularity: str = "file"
    function_split_threshold: int = 15
    test_glob: str = "test_*.py"
    restricted: tuple[str, ...] = DEFAULT_RESTRICTED
    transitive_test_map: bool = False
    backend: str = "scripted"
    traces: str | None = None
    templates_dir: str | None = None
    remote_base_url: str = "https://api.openai.com/v1"
    remote_model: str = "gpt-4o-mini"
    remote_api_key_env: str = "OPENAI_API_KEY"
    remote_timeout: float = 60.0
    remote_price_in: float = 0.0
    remote_price_out: float = 0.0
    remote_record: str | None = None
    remote_replay: str | None = None

    def __post_init__(self) -> None:
        if self.n_engineers < 1:
            raise ConfigError("n_engineers", "must be >= 1")
        for key in (
            "manager_max_iterations",
            "engineer_max_iterations",
            "max_rounds",
            "retry_budget",
            "conflict_retry_cap",
            "condensation_window",
            "function_split_threshold",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.per_run_timeout <= 0:
            raise ConfigError("per_run_timeout", "must be positive")
        _choice("isolation", self.isolation, ISOLATION_MODES)
        _choice("verification_mode", self.verification_mode, [m.value for m in PolicyMode])
        _choice("granularity", self.granularity, GRANULARITIES)
        _choice("backend", self.backend, BACKENDS)

    @property
    def engineer_ids(self) -> list[str]:
        return [f"engineer-{i}" for i in range(1, self.n_engineers + 1)]

    def policy(self) -> VerificationPolicy:
        return VerificationPolicy(
            mode=PolicyMode(self.verification_mode),
            test_command=self.test_command,
            per_run_timeout=self.per_run_timeout,
            retry_budget=self.retry_budget,
            entry_command=self.entry_command,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["restricted"] = list(self.restricted)
        return d


def _choice(key: str, value: str, allowed: typing.Sequence[str]) -> None:
    if value not in allowed:
        raise ConfigError(key, f"must be one of {', '.join(allowed)}; got {value!r}")


_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def coerce(key: str, value: Any) -> Any:
    """Convert a JSON value or override string to the field's declared type."""
    if key not in _HINTS:
        raise ConfigError(key, "unknown configuration key")
    hint = _HINTS[key]
    optional = typing.get_origin(hint) in (typing.Union, types.UnionType) and type(None) in typing.get_args(hint)
    base = next(a for a in typing.get_args(hint) if a is not type(None)) if optional else hint
    if optional and (value is None or (isinstance(value, str) and value.lower() in ("", "none", "null"))):
        return None
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if typing.get_origin(base) is tuple:
            if isinstance(value, str):
                value = [p.strip() for p in value.split(",") if p.strip()]
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
                raise ValueError(value)
            return tuple(value)
        if not isinstance(value, str):
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(key, f"cannot interpret {value!r} as {getattr(base, '__name__', base)}") from None


def parse_text(text: str) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", "expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from exc
        return dict(doc)
    return parse_text(text)


def build_config(base: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    merged = {**(base or {}), **(overrides or {})}
    return RunConfig(**{k: coerce(k, v) for k, v in merged.items()})


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, value = item.split("=", 1)
    key = key.strip().replace("-", "_")
    if key not in KEYS:
        raise ConfigError(key, "unknown configuration key")
    return key, value.strip()
