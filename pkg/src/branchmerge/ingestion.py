"""Static scan of a Python repository skeleton.

Finds stub functions (bodies that only hold a placeholder), file-level import
edges, and how many test cases exercise each file. The result seeds the
dependency graph the manager delegates from.
"""

from __future__ import annotations

import ast
import fnmatch
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from branchmerge import _json
from branchmerge.depgraph import Complexity, DependencyGraph, TaskUnit, build_graph
from branchmerge.errors import IoFailure

DEFAULT_TEST_GLOB = "test_*.py"
DEFAULT_RESTRICTED = ("__init__.py",)
DEFAULT_SPLIT_THRESHOLD = 15

_SKIP_DIRS = {".git", "__pycache__", ".venv", "venv", "node_modules", ".tox", "build", "dist"}


@dataclass
class RepoScan:
    stub_functions: dict[str, list[str]] = field(default_factory=dict)
    import_edges: set[tuple[str, str]] = field(default_factory=set)
    test_map: dict[str, int] = field(default_factory=dict)
    restricted_files: set[str] = field(default_factory=set)
    # test file -> test identifiers it defines, and -> source files it imports
    test_cases: dict[str, list[str]] = field(default_factory=dict)
    test_imports: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stub_functions": {k: list(v) for k, v in sorted(self.stub_functions.items())},
            "import_edges": [[a, b] for a, b in sorted(self.import_edges)],
            "test_map": dict(sorted(self.test_map.items())),
            "restricted_files": sorted(self.restricted_files),
            "test_cases": {k: list(v) for k, v in sorted(self.test_cases.items())},
            "test_imports": {k: list(v) for k, v in sorted(self.test_imports.items())},
        }

    def to_json(self) -> bytes:
        return _json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> RepoScan:
        return cls(
            stub_functions={k: list(v) for k, v in doc["stub_functions"].items()},
            import_edges={(a, b) for a, b in doc["import_edges"]},
            test_map=dict(doc["test_map"]),
            restricted_files=set(doc["restricted_files"]),
            test_cases={k: list(v) for k, v in doc.get("test_cases", {}).items()},
            test_imports={k: list(v) for k, v in doc.get("test_imports", {}).items()},
        )


def matches_any(path: str, patterns: Iterable[str]) -> bool:
    """Glob match against the full relative path or, for bare names, the basename."""
    p = PurePosixPath(path)
    for pat in patterns:
        if fnmatch.fnmatch(path, pat) or p.match(pat):
            return True
    return False


def is_placeholder_body(body: Sequence[ast.stmt]) -> bool:
    stmts = list(body)
    if stmts and _is_docstring(stmts[0]):
        stmts = stmts[1:]
    if len(stmts) != 1:
        return False
    s = stmts[0]
    if isinstance(s, ast.Pass):
        return True
    if isinstance(s, ast.Expr) and isinstance(s.value, ast.Constant) and s.value.value is Ellipsis:
        return True
    if isinstance(s, ast.Raise) and s.exc is not None:
        exc = s.exc.func if isinstance(s.exc, ast.Call) else s.exc
        return isinstance(exc, ast.Name) and exc.id == "NotImplementedError"
    return False


def _is_docstring(stmt: ast.stmt) -> bool:
    return isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Constant) and isinstance(
        stmt.value.value, str
    )


def find_stubs(tree: ast.Module) -> list[str]:
    out: list[str] = []

    def visit(nodes: Iterable[ast.stmt], prefix: str) -> None:
        for node in nodes:
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                if is_placeholder_body(node.body):
                    out.append(prefix + node.name)
            elif isinstance(node, ast.ClassDef):
                visit(node.body, f"{prefix}{node.name}.")

    visit(tree.body, "")
    return out


def _module_index(files: Iterable[str]) -> dict[str, str]:
    """Dotted module name -> relative file path, for every plausible import root."""
    index: dict[str, str] = {}
    for rel in files:
        parts = list(PurePosixPath(rel).with_suffix("").parts)
        if parts[-1] == "__init__":
            parts = parts[:-1]
        if not parts:
            continue
        # allow both "src/pkg/mod" and "pkg/mod" style roots
        for start in range(len(parts)):
            index.setdefault(".".join(parts[start:]), rel)
    return index


def _resolve_imports(rel: str, tree: ast.Module, index: dict[str, str]) -> set[str]:
    pkg_parts = list(PurePosixPath(rel).parent.parts)
    targets: set[str] = set()
    for node in tree.body:  # top level only
        names: list[str] = []
        if isinstance(node, ast.Import):
            names = [a.name for a in node.names]
        elif isinstance(node, ast.ImportFrom):
            if node.level:
                base = pkg_parts[: len(pkg_parts) - (node.level - 1)] if node.level > 1 else pkg_parts
                stem = ".".join(base + ([node.module] if node.module else []))
            else:
                stem = node.module or ""
            names = [stem] + [f"{stem}.{a.name}" if stem else a.name for a in node.names]
        for name in names:
            while name:
                if name in index:
                    if index[name] != rel:
                        targets.add(index[name])
                    break
                name = name.rpartition(".")[0]
    return targets


def _test_functions(tree: ast.Module) -> list[str]:
    found: list[str] = []
    for node in tree.body:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name.startswith("test"):
            found.append(node.name)
        elif isinstance(node, ast.ClassDef) and node.name.startswith("Test"):
            for sub in node.body:
                if isinstance(sub, (ast.FunctionDef, ast.AsyncFunctionDef)) and sub.name.startswith(
                    "test"
                ):
                    found.append(f"{node.name}::{sub.name}")
    return found


def _walk_python_files(root: Path) -> list[str]:
    rels: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SKIP_DIRS and not d.endswith("__wt"))
        for name in sorted(filenames):
            if name.endswith(".py"):
                rels.append(Path(dirpath, name).relative_to(root).as_posix())
    return sorted(rels)


def scan_repository(
    root: str | os.PathLike,
    test_glob: str = DEFAULT_TEST_GLOB,
    restricted: Sequence[str] = DEFAULT_RESTRICTED,
    *,
    transitive_test_map: bool = False,
) -> RepoScan:
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise IoFailure(f"cannot read repository root: {root}")

    files = _walk_python_files(root)
    trees: dict[str, ast.Module] = {}
    for rel in files:
        try:
            source = (root / rel).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read {rel}: {exc}") from exc
        try:
            trees[rel] = ast.parse(source, filename=rel)
        except SyntaxError:
            # unparsable files contribute nothing but are not fatal
            trees[rel] = ast.Module(body=[], type_ignores=[])

    tests = {rel for rel in files if matches_any(rel, [test_glob])}
    sources = [rel for rel in files if rel not in tests]
    index = _module_index(files)

    scan = RepoScan()
    scan.restricted_files = {rel for rel in files if matches_any(rel, restricted)}
    for rel in sources:
        stubs = find_stubs(trees[rel])
        if stubs:
            scan.stub_functions[rel] = stubs
        for dep in _resolve_imports(rel, trees[rel], index):
            if dep not in tests:
                scan.import_edges.add((dep, rel))

    closure = _import_closure(scan.import_edges) if transitive_test_map else {}
    for rel in sorted(tests):
        names = _test_functions(trees[rel])
        scan.test_cases[rel] = [f"{rel}::{n}" for n in names]
        direct = {d for d in _resolve_imports(rel, trees[rel], index) if d not in tests}
        reached = set(direct)
        for d in direct:
            reached |= closure.get(d, set())
        scan.test_imports[rel] = sorted(reached)
        for target in reached:
            scan.test_map[target] = scan.test_map.get(target, 0) + len(names)
    return scan


def _import_closure(edges: set[tuple[str, str]]) -> dict[str, set[str]]:
    """file -> every file it imports, directly or transitively."""
    deps: dict[str, set[str]] = {}
    for dep, importer in edges:
        deps.setdefault(importer, set()).add(dep)
    out: dict[str, set[str]] = {}
    for start in deps:
        seen: set[str] = set()
        todo = list(deps[start])
        while todo:
            d = todo.pop()
            if d in seen:
                continue
            seen.add(d)
            todo.extend(deps.get(d, ()))
        out[start] = seen
    return out


def _complexity_for(n_functions: int) -> Complexity:
    if n_functions <= 3:
        return Complexity.SIMPLE
    if n_functions <= 8:
        return Complexity.MEDIUM
    return Complexity.COMPLEX


def graph_from_scan(
    scan: RepoScan,
    granularity: str = "file",
    function_split_threshold: int = DEFAULT_SPLIT_THRESHOLD,
) -> DependencyGraph:
    """One unit per stubbed, non-restricted file; oversized files split by function.

    With ``granularity="function"`` every stub becomes its own unit. Split units
    inherit all edges of their file.
    """
    if function_split_threshold < 1:
        raise ValueError("function_split_threshold must be positive")
    if granularity not in ("file", "function"):
        raise ValueError(f"unknown granularity {granularity!r}")

    units: list[TaskUnit] = []
    by_file: dict[str, list[str]] = {}
    for path, stubs in sorted(scan.stub_functions.items()):
        if path in scan.restricted_files:
            continue
        if granularity == "function":
            chunks = [[s] for s in stubs]
        elif len(stubs) > function_split_threshold:
            k = math.ceil(len(stubs) / function_split_threshold)
            size, extra = divmod(len(stubs), k)
            chunks, pos = [], 0
            for i in range(k):
                n = size + (1 if i < extra else 0)
                chunks.append(stubs[pos : pos + n])
                pos += n
        else:
            chunks = [list(stubs)]
        if len(chunks) == 1:
            units.append(TaskUnit(path, path, tuple(chunks[0]), _complexity_for(len(chunks[0]))))
            by_file[path] = [path]
        else:
            ids = []
            for i, chunk in enumerate(chunks, start=1):
                uid = f"{path}#{i}"
                units.append(TaskUnit(uid, path, tuple(chunk), _complexity_for(len(chunk))))
                ids.append(uid)
            by_file[path] = ids

    deps = [
        (a, b)
        for dep, importer in sorted(scan.import_edges)
        if dep in by_file and importer in by_file
        for a in by_file[dep]
        for b in by_file[importer]
    ]
    coverage = {uid: scan.test_map.get(path, 0) for path, ids in by_file.items() for uid in ids}
    return build_graph(units, deps, coverage)
