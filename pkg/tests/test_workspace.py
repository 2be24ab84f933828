from __future__ import annotations

import pytest

from branchmerge.errors import DirtyTree, EmptyCommit, RestrictedFileChanged, VcsFailure, WorktreeExists
from branchmerge.workspace import (
    SALVAGE_TAG,
    MergeStatus,
    SyncMode,
    commit_shared,
    commit_worktree,
    create_worktree,
    has_conflict_markers,
    init_main,
    list_branches,
    merge_into_main,
    remove_worktree,
    salvage_worktree,
    shared_worktree,
    status_paths,
    sync_worktree,
)

from conftest import write_tree


@pytest.fixture
def repo(tmp_path):
    write_tree(tmp_path / "main", {
        "pkg/__init__.py": "",
        "pkg/a.py": "def a():\n    pass\n",
        "pkg/b.py": "def b():\n    pass\n",
        "shared.txt": "one\ntwo\nthree\n",
    })
    return init_main(tmp_path / "main")


def show(repo, path: str) -> str:
    return repo.git.run(["show", f"{repo.main_branch}:{path}"], repo.root).stdout


def edit(wt, rel: str, text: str) -> None:
    (wt.path / rel).parent.mkdir(parents=True, exist_ok=True)
    (wt.path / rel).write_text(text, encoding="utf-8")


def test_init_imports_and_applies_setup(tmp_path):
    write_tree(tmp_path / "r", {"x.py": "x = 1\n"})
    repo = init_main(tmp_path / "r", {"y.py": "def y():\n    pass\n", "x.py": None})
    assert status_paths(repo.git, repo.root) == []
    log = repo.git.run(["log", "--format=%s"], repo.root).stdout.splitlines()
    assert log == ["Manager setup: add missing stubs", "Import repository skeleton"]
    assert not (repo.root / "x.py").exists()


def test_init_rejects_dirty_existing_repo(repo):
    (repo.root / "pkg/a.py").write_text("changed\n")
    with pytest.raises(DirtyTree):
        init_main(repo.root)


def test_worktree_layout(repo):
    wt = create_worktree(repo, "engineer-1")
    assert wt.branch == "engineer/engineer-1"
    assert wt.path == repo.root.parent / "main__wt" / "engineer-1"
    assert (wt.path / "pkg/a.py").read_text() == "def a():\n    pass\n"
    with pytest.raises(WorktreeExists):
        create_worktree(repo, "engineer-1")
    assert "engineer/engineer-1" in list_branches(repo)


def test_commit_and_merge(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/a.py", "def a():\n    return 1\n")
    record = commit_worktree(repo, wt, "pkg/a.py", "Implement a")
    assert record.changed_files == ["pkg/a.py"]
    assert "Task: pkg/a.py" in record.message
    out = merge_into_main(repo, wt)
    assert out.status is MergeStatus.MERGED
    assert show(repo, "pkg/a.py") == "def a():\n    return 1\n"
    parents = repo.git.run(["log", "-1", "--format=%P"], repo.root).stdout.split()
    assert len(parents) == 2  # always a merge commit


def test_empty_commit_rejected(repo):
    wt = create_worktree(repo, "engineer-1")
    with pytest.raises(EmptyCommit):
        commit_worktree(repo, wt, "t", "nothing")


def test_restricted_file_rejected(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/__init__.py", "import os\n")
    edit(wt, "pkg/a.py", "def a():\n    return 2\n")
    with pytest.raises(RestrictedFileChanged) as exc:
        commit_worktree(repo, wt, "t", "bad")
    assert exc.value.paths == ["pkg/__init__.py"]


def test_restricted_new_file_rejected(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "extra/__init__.py", "")
    with pytest.raises(RestrictedFileChanged):
        commit_worktree(repo, wt, "t", "bad")


def test_conflict_is_aborted_and_main_unchanged(repo):
    w1, w2 = create_worktree(repo, "engineer-1"), create_worktree(repo, "engineer-2")
    edit(w1, "shared.txt", "one\nTWO-A\nthree\n")
    edit(w2, "shared.txt", "one\nTWO-B\nthree\n")
    commit_worktree(repo, w1, "a", "a")
    commit_worktree(repo, w2, "b", "b")
    assert merge_into_main(repo, w1).status is MergeStatus.MERGED
    head = repo.refresh_head()
    out = merge_into_main(repo, w2)
    assert out.status is MergeStatus.CONFLICT and out.conflicting_files == ["shared.txt"]
    assert repo.refresh_head() == head
    assert status_paths(repo.git, repo.root) == []
    assert show(repo, "shared.txt") == "one\nTWO-A\nthree\n"

    # resolve in the engineer worktree: pull main, fix markers, recommit, merge
    sync_worktree(repo, w2, SyncMode.PULL_MAIN)
    assert has_conflict_markers(w2) == ["shared.txt"]
    edit(w2, "shared.txt", "one\nTWO-AB\nthree\n")
    commit_worktree(repo, w2, "b", "resolve")
    assert merge_into_main(repo, w2).status is MergeStatus.MERGED
    assert show(repo, "shared.txt") == "one\nTWO-AB\nthree\n"


def test_merge_with_nothing_ahead(repo):
    wt = create_worktree(repo, "engineer-1")
    with pytest.raises(VcsFailure):
        merge_into_main(repo, wt)


def test_pull_main_brings_other_work(repo):
    w1, w2 = create_worktree(repo, "engineer-1"), create_worktree(repo, "engineer-2")
    edit(w1, "pkg/a.py", "A\n")
    commit_worktree(repo, w1, "a", "a")
    merge_into_main(repo, w1)
    sync_worktree(repo, w2, SyncMode.PULL_MAIN)
    assert (w2.path / "pkg/a.py").read_text() == "A\n"


def test_hard_reset_discards(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/a.py", "junk\n")
    edit(wt, "new.py", "junk\n")
    sync_worktree(repo, wt, SyncMode.HARD_RESET)
    assert status_paths(repo.git, wt.path) == []


def test_salvage_keeps_only_unrestricted(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/a.py", "partial\n")
    edit(wt, "pkg/__init__.py", "oops\n")
    record = salvage_worktree(repo, wt, "pkg/a.py")
    assert record is not None and record.changed_files == ["pkg/a.py"]
    assert record.message.startswith(SALVAGE_TAG)
    assert status_paths(repo.git, wt.path) == []
    assert (wt.path / "pkg/__init__.py").read_text() == ""


def test_salvage_nothing(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/__init__.py", "oops\n")
    assert salvage_worktree(repo, wt, "t") is None
    assert status_paths(repo.git, wt.path) == []


def test_remove_worktree_idempotent_and_recreate(repo):
    wt = create_worktree(repo, "engineer-1")
    edit(wt, "pkg/a.py", "A\n")
    commit_worktree(repo, wt, "a", "a")
    remove_worktree(repo, wt)
    remove_worktree(repo, wt)
    assert not wt.path.exists()
    again = create_worktree(repo, "engineer-1")
    assert (again.path / "pkg/a.py").read_text() == "A\n"  # branch survived


def test_shared_commit_only_named_paths(repo):
    wt = shared_worktree(repo, "engineer-1")
    assert wt.shared and wt.path == repo.root
    (repo.root / "pkg/a.py").write_text("A\n")
    (repo.root / "pkg/b.py").write_text("B\n")
    record = commit_shared(repo, "engineer-1", "a", ["pkg/a.py"], "a only")
    assert record.changed_files == ["pkg/a.py"]
    assert status_paths(repo.git, repo.root) == ["pkg/b.py"]
    with pytest.raises(EmptyCommit):
        commit_shared(repo, "engineer-2", "x", ["shared.txt"], "none")


def test_deterministic_hashes(tmp_path):
    heads = []
    for name in ("r1", "r2"):
        write_tree(tmp_path / name / "repo", {"a.py": "x = 1\n"})
        repo = init_main(tmp_path / name / "repo")
        wt = create_worktree(repo, "engineer-1")
        edit(wt, "a.py", "x = 2\n")
        commit_worktree(repo, wt, "a", "a")
        merge_into_main(repo, wt)
        heads.append(repo.refresh_head())
    assert heads[0] == heads[1]


def test_git_calls_are_audited_relative(repo):
    create_worktree(repo, "engineer-1")
    assert repo.git.calls
    assert all(not str(c.get("cwd", "")).startswith("/") for c in repo.git.calls)
