"""Test-based self-verification inside a worktree, and the commit gate."""

from __future__ import annotations

import os
import re
import shlex
import signal
import subprocess
import sys
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum

from branchmerge.errors import CommandFailure, VerificationTimeout
from branchmerge.ingestion import RepoScan
from branchmerge.workspace import Worktree

DEFAULT_SUITE = "::default-suite::"
DEFAULT_TEST_COMMAND = "{python} -m pytest -q -p no:cacheprovider {selection}"
EXCERPT_CHARS = 4000

_COUNT_RE = re.compile(r"(\d+) (passed|failed|errors?|xfailed|xpassed|skipped)\b")


class PolicyMode(str, Enum):
    ENGINEER_SELF_VERIFICATION = "engineer_self_verification"
    ROUND_MANAGER_REVIEW = "round_manager_review"
    EFFICIENCY_PRIORITIZED = "efficiency_prioritized"


class GateDecision(str, Enum):
    ALLOW = "allow"
    RETRY = "retry"
    ESCALATE = "escalate"


@dataclass(frozen=True)
class VerificationPolicy:
    mode: PolicyMode = PolicyMode.ENGINEER_SELF_VERIFICATION
    test_command: str = DEFAULT_TEST_COMMAND
    per_run_timeout: float = 120.0
    retry_budget: int = 3
    # used when a repository has no test mapping and no default suite
    entry_command: str | None = None
    default_selection: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        if self.per_run_timeout <= 0:
            raise ValueError("per_run_timeout must be positive")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")

    @property
    def strict(self) -> bool:
        return self.mode is not PolicyMode.EFFICIENCY_PRIORITIZED

    @property
    def needs_manager_review(self) -> bool:
        return self.mode is PolicyMode.ROUND_MANAGER_REVIEW


@dataclass
class VerificationReport:
    selected_tests: list[str] = field(default_factory=list)
    passed: int = 0
    failed: int = 0
    errored: int = 0
    duration: float = 0.0
    log_excerpt: str = ""

    @property
    def executed(self) -> int:
        return self.passed + self.failed + self.errored

    @property
    def clean(self) -> bool:
        return self.failed == 0 and self.errored == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> VerificationReport:
        return cls(**d)


def select_tests(scan: RepoScan, changed_files: Sequence[str]) -> list[str]:
    """Tests from every test file that imports a changed file.

    Falls back to the default-suite sentinel when the scan has no mapping at all.
    """
    if not changed_files:
        return []
    if not scan.test_imports:
        return [DEFAULT_SUITE]
    changed = set(changed_files)
    picked: list[str] = []
    for test_file, targets in sorted(scan.test_imports.items()):
        if test_file in changed or changed & set(targets):
            picked.extend(scan.test_cases.get(test_file, []))
    return picked


def parse_counts(output: str) -> tuple[int, int, int]:
    """(passed, failed, errored) from a pytest-style summary line."""
    passed = failed = errored = 0
    lines = [ln for ln in output.splitlines() if _COUNT_RE.search(ln)]
    if not lines:
        return 0, 0, 0
    for n, word in _COUNT_RE.findall(lines[-1]):
        if word == "passed":
            passed = int(n)
        elif word == "failed":
            failed = int(n)
        elif word.startswith("error"):
            errored = int(n)
    return passed, failed, errored


def build_command(policy: VerificationPolicy, tests: Sequence[str]) -> list[str]:
    if list(tests) == [DEFAULT_SUITE]:
        if policy.test_command:
            selection = policy.default_selection
            template = policy.test_command
        elif policy.entry_command:
            return shlex.split(policy.entry_command.replace("{python}", shlex.quote(sys.executable)))
        else:
            raise CommandFailure("no test mapping and no entry_command configured")
    else:
        selection = " ".join(shlex.quote(t) for t in tests)
        template = policy.test_command
    text = template.replace("{python}", shlex.quote(sys.executable)).replace("{selection}", selection)
    return shlex.split(text)


def run_verification(
    wt: Worktree, policy: VerificationPolicy, tests: Sequence[str]
) -> VerificationReport:
    """Run the configured test command for ``tests`` inside the worktree.

    Failing tests are a normal report; only an unstartable runner or a timeout
    raises. Bytecode caching is disabled so the tree is left untouched.
    """
    if not tests:
        return VerificationReport()
    argv = build_command(policy, tests)
    env = dict(os.environ, PYTHONDONTWRITEBYTECODE="1", PYTHONHASHSEED="0")
    env.pop("PYTEST_ADDOPTS", None)
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            argv,
            cwd=wt.path,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            start_new_session=True,
        )
    except OSError as exc:
        raise CommandFailure(f"cannot start {argv[0]!r}: {exc}") from exc
    try:
        out, _ = proc.communicate(timeout=policy.per_run_timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.communicate()
        raise VerificationTimeout(policy.per_run_timeout) from None
    duration = time.monotonic() - start
    if proc.returncode in (126, 127):
        raise CommandFailure(f"runner could not start: {out[-500:]}")
    passed, failed, errored = parse_counts(out)
    if proc.returncode != 0 and passed + failed + errored == 0 and proc.returncode != 5:
        # the runner crashed before reporting; count it as one errored execution
        errored = 1
    return VerificationReport(
        selected_tests=list(tests),
        passed=passed,
        failed=failed,
        errored=errored,
        duration=round(duration, 3),
        log_excerpt=out[-EXCERPT_CHARS:],
    )


def gate_commit(
    report: VerificationReport, policy: VerificationPolicy, attempts_used: int = 1
) -> GateDecision:
    """Decide whether a verified change may be committed.

    ``attempts_used`` counts verification cycles already spent on the task,
    including this one.
    """
    if report.clean:
        return GateDecision.ALLOW
    exhausted = attempts_used >= policy.retry_budget
    if policy.mode is PolicyMode.EFFICIENCY_PRIORITIZED:
        return GateDecision.ALLOW if exhausted else GateDecision.RETRY
    return GateDecision.ESCALATE if exhausted else GateDecision.RETRY
