from __future__ import annotations

import itertools
import textwrap
from pathlib import Path

import pytest
from hypothesis import strategies as st

from branchmerge.depgraph import Complexity, TaskUnit, build_graph


def write_tree(root: Path, files: dict[str, str]) -> Path:
    for rel, text in files.items():
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(textwrap.dedent(text), encoding="utf-8")
    return root


@pytest.fixture
def tree(tmp_path):
    def make(files: dict[str, str], name: str = "src") -> Path:
        return write_tree(tmp_path / name, files)

    return make


def unit(uid: str, file: str | None = None, functions=(), complexity=Complexity.SIMPLE) -> TaskUnit:
    return TaskUnit(uid, file or f"{uid}.py", tuple(functions), complexity)


def graph_of(ids, edges=(), coverage=None, complexities=None):
    complexities = complexities or {}
    return build_graph(
        [unit(i, complexity=complexities.get(i, Complexity.SIMPLE)) for i in ids], list(edges), coverage
    )


@st.composite
def dags(draw, max_nodes: int = 12):
    """Random DAG: edges only go from a lower to a higher index."""
    n = draw(st.integers(1, max_nodes))
    ids = [f"u{i:02d}" for i in range(n)]
    pairs = [(a, b) for a, b in itertools.combinations(range(n), 2)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    comps = draw(st.lists(st.sampled_from(list(Complexity)), min_size=n, max_size=n))
    cov = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    return ids, [(ids[a], ids[b]) for a, b in chosen], dict(zip(ids, comps)), dict(zip(ids, cov))


@st.composite
def digraphs(draw, max_nodes: int = 10):
    """Random directed graph, cycles allowed, no self loops."""
    n = draw(st.integers(1, max_nodes))
    ids = [f"n{i}" for i in range(n)]
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=min(len(pairs), 25))) if pairs else []
    comps = draw(st.lists(st.sampled_from(list(Complexity)), min_size=n, max_size=n))
    return ids, [(ids[a], ids[b]) for a, b in chosen], dict(zip(ids, comps))


def reachability(ids, edges) -> dict[str, set[str]]:
    """Transitive closure by repeated relaxation; deliberately naive."""
    reach = {i: {i} for i in ids}
    changed = True
    while changed:
        changed = False
        for a, b in edges:
            for src in ids:
                if a in reach[src] and b not in reach[src]:
                    reach[src].add(b)
                    changed = True
    return reach


def brute_ready(g) -> set[str]:
    """Pending units whose every predecessor outside their own cycle is completed."""
    reach = reachability(list(g.units), g.edges)
    out = set()
    for uid, u in g.units.items():
        if u.status.value != "pending":
            continue
        preds = [a for a, b in g.edges if b == uid and not (uid in reach[a] and a in reach[uid])]
        if all(p in g.completed for p in preds):
            out.add(uid)
    return out


# -- bundled scenario runs shared across modules ------------------------------------


@pytest.fixture(scope="session")
def bundled_runs(tmp_path_factory):
    """name -> (comparison report, output dir) for every bundled scenario, run once per session."""
    from branchmerge.scenarios import bundled_names, load_scenario, simulate

    root = tmp_path_factory.mktemp("bundled")
    runs = {}
    for name in bundled_names():
        out = root / name
        runs[name] = (simulate(load_scenario(name), out), out)
    return runs


# -- acceptance summary -------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    outcomes = _CRITERIA.setdefault(n, (title, []))[1]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        outcomes.append("PASS" if call.excinfo is None else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[n]
        verdict = "PASS" if outcomes and all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n:>2} {title}: {verdict}")
