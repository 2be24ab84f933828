"""Git-backed workspace: main branch, per-engineer worktrees, commits and merges.

Everything shells out to the ``git`` executable. Calls are recorded verbatim in
``Git.calls`` for audit. Commit timestamps come from a counter, not the wall
clock, so identical runs produce identical commit hashes.

Operations that move main (:func:`init_main`, :func:`merge_into_main`,
:func:`commit_shared`) must be serialized by the caller.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from branchmerge.errors import (
    DirtyTree,
    EmptyCommit,
    RestrictedFileChanged,
    VcsFailure,
    WorktreeExists,
)
from branchmerge.ingestion import DEFAULT_RESTRICTED, matches_any

log = logging.getLogger(__name__)

MANAGER = "manager"
_EPOCH = 1_700_000_000
SALVAGE_TAG = "[salvage]"


class Git:
    """Thin subprocess wrapper with a deterministic environment."""

    def __init__(self, base: Path | None = None) -> None:
        self.base = base
        self.calls: list[dict] = []
        self._commits = 0

    def _env(self, identity: str) -> dict[str, str]:
        env = {k: v for k, v in os.environ.items() if not k.startswith("GIT_")}
        stamp = f"@{_EPOCH + 60 * self._commits} +0000"
        env.update(
            GIT_CONFIG_GLOBAL=os.devnull,
            GIT_CONFIG_NOSYSTEM="1",
            GIT_AUTHOR_NAME=identity,
            GIT_AUTHOR_EMAIL=f"{identity}@agents.invalid",
            GIT_COMMITTER_NAME=identity,
            GIT_COMMITTER_EMAIL=f"{identity}@agents.invalid",
            GIT_AUTHOR_DATE=stamp,
            GIT_COMMITTER_DATE=stamp,
            LC_ALL="C",
            LANG="C",
        )
        return env

    def run(
        self,
        args: Sequence[str],
        cwd: Path,
        *,
        identity: str = MANAGER,
        check: bool = True,
    ) -> subprocess.CompletedProcess[str]:
        if args and args[0] in ("commit", "merge"):
            self._commits += 1
        cmd = [
            "git",
            "-c", "core.autocrlf=false",
            "-c", "commit.gpgsign=false",
            "-c", "merge.conflictstyle=merge",
            "-c", "advice.detachedHead=false",
            *args,
        ]
        try:
            proc = subprocess.run(
                cmd, cwd=cwd, env=self._env(identity), capture_output=True, text=True, check=False
            )
        except OSError as exc:
            raise VcsFailure(f"cannot run git: {exc}", args=list(args)) from exc
        where = str(cwd)
        if self.base is not None:
            try:
                where = Path(cwd).resolve().relative_to(self.base.resolve()).as_posix()
            except ValueError:
                pass
        shown = list(args)
        if self.base is not None:
            prefixes = sorted({str(self.base.resolve()), str(self.base)}, key=len, reverse=True)
            for i, a in enumerate(shown):
                for pre in prefixes:
                    if a.startswith(pre):
                        shown[i] = "." + a[len(pre):]
                        break
        self.calls.append(
            {
                "args": shown,
                "cwd": where,
                "returncode": proc.returncode,
                "stdout": proc.stdout,
                "stderr": proc.stderr,
            }
        )
        log.debug("git %s (cwd=%s) -> %d", " ".join(args), where, proc.returncode)
        if check and proc.returncode != 0:
            raise VcsFailure(
                f"git {' '.join(args)} failed ({proc.returncode}): {proc.stderr.strip()}",
                args=list(args),
                output=proc.stdout + proc.stderr,
            )
        return proc


@dataclass
class Worktree:
    engineer_id: str
    branch: str
    path: Path
    base_commit: str
    active: bool = True
    shared: bool = False


@dataclass
class Repository:
    root: Path
    main_branch: str = "main"
    restricted_files: tuple[str, ...] = DEFAULT_RESTRICTED
    head: str = ""
    git: Git = field(default_factory=Git, repr=False)
    worktrees: dict[str, Worktree] = field(default_factory=dict, repr=False)

    @property
    def worktree_root(self) -> Path:
        return self.root.parent / f"{self.root.name}__wt"

    def refresh_head(self) -> str:
        self.head = _head(self.git, self.root)
        return self.head

    def is_restricted(self, path: str) -> bool:
        return matches_any(path, self.restricted_files)


@dataclass
class CommitRecord:
    commit_id: str
    engineer_id: str
    task_id: str
    changed_files: list[str]
    message: str


class MergeStatus(str, Enum):
    MERGED = "merged"
    CONFLICT = "conflict"


@dataclass
class MergeOutcome:
    status: MergeStatus
    merge_commit: str | None = None
    conflicting_files: list[str] = field(default_factory=list)


class SyncMode(str, Enum):
    PULL_MAIN = "pull_main"
    HARD_RESET = "hard_reset"


def branch_name(engineer_id: str) -> str:
    return f"engineer/{engineer_id}"


def _head(git: Git, cwd: Path) -> str:
    return git.run(["log", "-1", "--format=%H"], cwd).stdout.strip()


def status_paths(git: Git, cwd: Path) -> list[str]:
    """Paths with uncommitted changes (tracked or untracked), sorted."""
    out = git.run(
        ["status", "--porcelain=v1", "-z", "--untracked-files=all", "--no-renames"], cwd
    ).stdout
    paths = {entry[3:] for entry in out.split("\0") if len(entry) > 3}
    return sorted(paths)


def _conflicted(git: Git, cwd: Path) -> list[str]:
    out = git.run(["diff", "--name-only", "--diff-filter=U"], cwd).stdout
    return sorted(p for p in out.splitlines() if p)


def _differs_from(git: Git, cwd: Path, rev: str, paths: Sequence[str]) -> set[str]:
    if not paths:
        return set()
    out = git.run(["diff", "--name-only", rev, "--", *paths], cwd).stdout
    return {p for p in out.splitlines() if p}


def _write_changes(root: Path, changes: Mapping[str, str | bytes | None]) -> None:
    for rel, content in sorted(changes.items()):
        target = root / rel
        if content is None:
            if target.exists():
                target.unlink()
            continue
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")


# -- main branch --------------------------------------------------------------


def init_main(
    root: str | os.PathLike,
    setup_changes: Mapping[str, str | bytes | None] | None = None,
    *,
    restricted: Sequence[str] = DEFAULT_RESTRICTED,
    main_branch: str = "main",
    git: Git | None = None,
) -> Repository:
    """Bring ``root`` to a clean committed state on the main branch.

    A plain directory is imported as the first commit. Manager setup changes
    (``path -> content``; ``None`` deletes) are committed on top.
    """
    root = Path(root)
    git = git or Git(root.parent)
    if not (root / ".git").exists():
        root.mkdir(parents=True, exist_ok=True)
        git.run(["init", "-q", "-b", main_branch], root)
        git.run(["add", "-A"], root)
        git.run(["commit", "-q", "--allow-empty", "-m", "Import repository skeleton"], root)
    else:
        current = git.run(["branch", "--show-current"], root).stdout.strip()
        if current != main_branch:
            raise VcsFailure(f"root is on branch {current!r}, expected {main_branch!r}")
        if status_paths(git, root) and setup_changes is None:
            raise DirtyTree(f"uncommitted changes in {root}")
    if setup_changes:
        _write_changes(root, setup_changes)
    if status_paths(git, root):
        git.run(["add", "-A"], root)
        git.run(["commit", "-q", "-m", "Manager setup: add missing stubs"], root)
    repo = Repository(root=root, main_branch=main_branch, restricted_files=tuple(restricted), git=git)
    repo.refresh_head()
    return repo


# -- worktrees ----------------------------------------------------------------


def create_worktree(repo: Repository, engineer_id: str) -> Worktree:
    existing = repo.worktrees.get(engineer_id)
    if existing is not None and existing.active:
        raise WorktreeExists(engineer_id)
    branch = branch_name(engineer_id)
    path = repo.worktree_root / engineer_id
    if path.exists():
        raise VcsFailure(f"worktree directory already exists: {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    known = repo.git.run(["branch", "--list", branch], repo.root).stdout.strip()
    if known:
        repo.git.run(["worktree", "add", "-q", str(path), branch], repo.root)
        wt = Worktree(engineer_id, branch, path, base_commit=repo.refresh_head())
        sync_worktree(repo, wt, SyncMode.PULL_MAIN)
    else:
        repo.git.run(["worktree", "add", "-q", "-b", branch, str(path), repo.main_branch], repo.root)
        wt = Worktree(engineer_id, branch, path, base_commit=repo.refresh_head())
    repo.worktrees[engineer_id] = wt
    return wt


def shared_worktree(repo: Repository, engineer_id: str) -> Worktree:
    """A handle onto the main working tree itself, for soft-isolation runs."""
    return Worktree(engineer_id, repo.main_branch, repo.root, repo.refresh_head(), shared=True)


def commit_worktree(repo: Repository, wt: Worktree, task_id: str, message: str) -> CommitRecord:
    if not wt.active:
        raise VcsFailure(f"worktree for {wt.engineer_id} is not active")
    changed = status_paths(repo.git, wt.path)
    if not changed:
        raise EmptyCommit(f"{wt.engineer_id}: nothing to commit")
    restricted = [p for p in changed if repo.is_restricted(p)]
    # a restricted file that merely matches main (brought in by pull_main) is fine
    violating = _differs_from(repo.git, wt.path, repo.refresh_head(), restricted) | {
        p for p in restricted if not (wt.path / p).exists() or _untracked(repo.git, wt.path, p)
    }
    violating &= set(restricted)
    if violating:
        raise RestrictedFileChanged(violating)
    repo.git.run(["add", "-A"], wt.path, identity=wt.engineer_id)
    full = f"{message}\n\nTask: {task_id}\nEngineer: {wt.engineer_id}"
    repo.git.run(["commit", "-q", "-m", full], wt.path, identity=wt.engineer_id)
    return CommitRecord(_head(repo.git, wt.path), wt.engineer_id, task_id, changed, full)


def _untracked(git: Git, cwd: Path, path: str) -> bool:
    out = git.run(["status", "--porcelain=v1", "--untracked-files=all", "--", path], cwd).stdout
    return out.startswith("??")


def commit_shared(
    repo: Repository, engineer_id: str, task_id: str, paths: Sequence[str], message: str
) -> CommitRecord:
    """Commit only ``paths`` straight onto main (soft isolation has no branches)."""
    dirty = set(status_paths(repo.git, repo.root))
    changed = sorted(p for p in set(paths) if p in dirty)
    if not changed:
        raise EmptyCommit(f"{engineer_id}: nothing to commit")
    restricted = [p for p in changed if repo.is_restricted(p)]
    if restricted:
        raise RestrictedFileChanged(restricted)
    repo.git.run(["add", "-A", "--", *changed], repo.root, identity=engineer_id)
    full = f"{message}\n\nTask: {task_id}\nEngineer: {engineer_id}"
    repo.git.run(["commit", "-q", "-m", full], repo.root, identity=engineer_id)
    return CommitRecord(repo.refresh_head(), engineer_id, task_id, changed, full)


def merge_into_main(repo: Repository, wt: Worktree) -> MergeOutcome:
    """Merge the engineer branch into main with a merge commit.

    A conflicted merge is aborted so main never holds conflict state; the
    conflicting paths are reported instead.
    """
    git, root = repo.git, repo.root
    before = repo.refresh_head()
    ahead = git.run(["log", "--format=%H", f"{repo.main_branch}..{wt.branch}"], root).stdout.split()
    if not ahead:
        raise VcsFailure(f"{wt.branch} has nothing to merge into {repo.main_branch}")
    msg = f"Merge {wt.branch} into {repo.main_branch}"
    proc = git.run(["merge", "--no-ff", "--no-edit", "-m", msg, wt.branch], root, check=False)
    if proc.returncode == 0:
        return MergeOutcome(MergeStatus.MERGED, merge_commit=repo.refresh_head())
    conflicts = _conflicted(git, root)
    if not conflicts:
        raise VcsFailure(
            f"merge of {wt.branch} failed: {proc.stderr.strip() or proc.stdout.strip()}",
            args=["merge", wt.branch],
            output=proc.stdout + proc.stderr,
        )
    git.run(["merge", "--abort"], root)
    if repo.refresh_head() != before:
        raise VcsFailure("main moved during an aborted merge")
    return MergeOutcome(MergeStatus.CONFLICT, conflicting_files=conflicts)


def sync_worktree(repo: Repository, wt: Worktree, mode: SyncMode | str) -> Worktree:
    mode = SyncMode(mode)
    if not wt.active:
        raise VcsFailure(f"worktree for {wt.engineer_id} is not active")
    git = repo.git
    if mode is SyncMode.HARD_RESET:
        git.run(["reset", "-q", "--hard", "HEAD"], wt.path)
        git.run(["clean", "-q", "-fd"], wt.path)
        return wt
    if wt.shared:
        wt.base_commit = repo.refresh_head()
        return wt
    proc = git.run(["merge", "--no-edit", repo.main_branch], wt.path, identity=wt.engineer_id, check=False)
    if proc.returncode != 0 and not _conflicted(git, wt.path):
        raise VcsFailure(
            f"pull of {repo.main_branch} into {wt.branch} failed: {proc.stderr.strip()}",
            output=proc.stdout + proc.stderr,
        )
    wt.base_commit = repo.refresh_head()
    return wt


def has_conflict_markers(wt: Worktree) -> list[str]:
    out = []
    for path in sorted(wt.path.rglob("*")):
        if ".git" in path.parts or not path.is_file():
            continue
        try:
            text = path.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        if "<<<<<<< " in text and ">>>>>>> " in text:
            out.append(path.relative_to(wt.path).as_posix())
    return out


def salvage_worktree(repo: Repository, wt: Worktree, task_id: str) -> CommitRecord | None:
    """Commit an unresponsive engineer's non-restricted edits on its branch.

    Restricted edits are discarded. Returns None when nothing is worth keeping.
    """
    git = repo.git
    if wt.shared:
        raise VcsFailure("salvage of the shared tree goes through commit_shared")
    changed = status_paths(git, wt.path)
    keep = [p for p in changed if not repo.is_restricted(p)]
    if not keep:
        if changed:
            sync_worktree(repo, wt, SyncMode.HARD_RESET)
        return None
    git.run(["add", "-A", "--", *keep], wt.path)
    msg = f"{SALVAGE_TAG} partial work on {task_id}\n\nTask: {task_id}\nEngineer: {wt.engineer_id}"
    git.run(["commit", "-q", "-m", msg], wt.path, identity=MANAGER)
    record = CommitRecord(_head(git, wt.path), wt.engineer_id, task_id, keep, msg)
    if len(keep) != len(changed):
        sync_worktree(repo, wt, SyncMode.HARD_RESET)
    return record


def remove_worktree(repo: Repository, wt: Worktree) -> None:
    """Delete the worktree directory; the branch is kept for audit."""
    if wt.shared:
        wt.active = False
        return
    if wt.path.exists():
        repo.git.run(["worktree", "remove", "--force", str(wt.path)], repo.root)
    if wt.path.exists():
        shutil.rmtree(wt.path)
    repo.git.run(["worktree", "prune"], repo.root)
    wt.active = False
    if repo.worktrees.get(wt.engineer_id) is wt:
        del repo.worktrees[wt.engineer_id]


def list_branches(repo: Repository) -> list[str]:
    out = repo.git.run(["branch", "--format=%(refname:short)"], repo.root).stdout
    return sorted(b for b in out.splitlines() if b)
