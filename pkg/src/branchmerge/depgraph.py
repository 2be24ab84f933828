"""Dependency graph over units of work.

An edge ``(u, v)`` means *v depends on u*: v may only be delegated once u has
been completed and merged into main. Cycles are tolerated; they are collapsed
into strongly connected components before any scheduling decision.
"""

from __future__ import annotations

import copy
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum

from branchmerge import _json
from branchmerge.errors import DuplicateUnit, GraphError, InvalidTransition, UnknownUnit


class Complexity(str, Enum):
    SIMPLE = "simple"
    MEDIUM = "medium"
    COMPLEX = "complex"

    @property
    def weight(self) -> int:
        return _WEIGHTS[self]


_WEIGHTS = {Complexity.SIMPLE: 1, Complexity.MEDIUM: 2, Complexity.COMPLEX: 3}


class UnitStatus(str, Enum):
    PENDING = "pending"
    ASSIGNED = "assigned"
    COMPLETED = "completed"
    INTEGRATED = "integrated"


# completed -> assigned covers rework after a failed gate or a merge conflict;
# assigned/completed -> pending covers a unit handed back by a retired engineer.
_TRANSITIONS: dict[UnitStatus, frozenset[UnitStatus]] = {
    UnitStatus.PENDING: frozenset({UnitStatus.ASSIGNED}),
    UnitStatus.ASSIGNED: frozenset({UnitStatus.COMPLETED, UnitStatus.PENDING}),
    UnitStatus.COMPLETED: frozenset({UnitStatus.INTEGRATED, UnitStatus.ASSIGNED, UnitStatus.PENDING}),
    UnitStatus.INTEGRATED: frozenset(),
}


@dataclass
class TaskUnit:
    unit_id: str
    file_path: str
    functions: tuple[str, ...] = ()
    complexity: Complexity = Complexity.SIMPLE
    status: UnitStatus = UnitStatus.PENDING

    def __post_init__(self) -> None:
        self.functions = tuple(dict.fromkeys(self.functions))
        self.complexity = Complexity(self.complexity)
        self.status = UnitStatus(self.status)

    @property
    def whole_file(self) -> bool:
        return not self.functions


@dataclass
class MajorTaskGroup:
    group_id: str
    unit_ids: list[str]
    assigned_engineer: str | None = None


@dataclass
class DependencyGraph:
    units: dict[str, TaskUnit]
    edges: set[tuple[str, str]] = field(default_factory=set)
    completed: set[str] = field(default_factory=set)
    round: int = 0
    coverage: dict[str, int] = field(default_factory=dict)

    def predecessors(self, unit_id: str) -> list[str]:
        return sorted(u for u, v in self.edges if v == unit_id)

    def successors(self, unit_id: str) -> list[str]:
        return sorted(v for u, v in self.edges if u == unit_id)

    def coverage_weight(self, unit_id: str) -> int:
        return self.coverage.get(unit_id, 0)

    def units_for_file(self, file_path: str) -> list[TaskUnit]:
        return [u for _, u in sorted(self.units.items()) if u.file_path == file_path]

    def files(self) -> set[str]:
        return {u.file_path for u in self.units.values()}

    def status_of(self, unit_id: str) -> UnitStatus:
        return self._unit(unit_id).status

    def remaining(self) -> list[str]:
        return sorted(uid for uid, u in self.units.items() if u.status is not UnitStatus.INTEGRATED)

    def set_status(self, unit_id: str, target: UnitStatus) -> None:
        unit = self._unit(unit_id)
        target = UnitStatus(target)
        if target not in _TRANSITIONS[unit.status]:
            raise InvalidTransition(unit_id, unit.status.value, target.value)
        unit.status = target

    def assign(self, unit_id: str) -> None:
        self.set_status(unit_id, UnitStatus.ASSIGNED)

    def mark_completed(self, unit_id: str) -> None:
        self.set_status(unit_id, UnitStatus.COMPLETED)

    def release(self, unit_id: str) -> None:
        self.set_status(unit_id, UnitStatus.PENDING)

    def snapshot(self) -> DependencyGraph:
        return copy.deepcopy(self)

    def _unit(self, unit_id: str) -> TaskUnit:
        try:
            return self.units[unit_id]
        except KeyError:
            raise UnknownUnit(unit_id) from None

    # -- canonical JSON --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "units": [
                {
                    "unit_id": u.unit_id,
                    "file_path": u.file_path,
                    "functions": list(u.functions),
                    "complexity": u.complexity.value,
                }
                for _, u in sorted(self.units.items())
            ],
            "edges": [[a, b] for a, b in sorted(self.edges)],
            "completed": sorted(self.completed),
            "round": self.round,
        }

    def to_json(self) -> bytes:
        return _json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping) -> DependencyGraph:
        if list(doc) != ["units", "edges", "completed", "round"]:
            raise GraphError(f"graph document keys out of order or missing: {list(doc)}")
        units = [
            TaskUnit(
                unit_id=u["unit_id"],
                file_path=u["file_path"],
                functions=tuple(u["functions"]),
                complexity=Complexity(u["complexity"]),
            )
            for u in doc["units"]
        ]
        g = build_graph(units, [tuple(e) for e in doc["edges"]])
        for uid in doc["completed"]:
            g._unit(uid).status = UnitStatus.INTEGRATED
            g.completed.add(uid)
        g.round = int(doc["round"])
        return g

    @classmethod
    def from_json(cls, raw: bytes | str) -> DependencyGraph:
        return cls.from_dict(json.loads(raw))


def build_graph(
    units: Iterable[TaskUnit],
    deps: Iterable[tuple[str, str]],
    coverage: Mapping[str, int] | None = None,
) -> DependencyGraph:
    by_id: dict[str, TaskUnit] = {}
    for unit in units:
        if unit.unit_id in by_id:
            raise DuplicateUnit(unit.unit_id)
        by_id[unit.unit_id] = unit
    _check_function_sets(by_id.values())

    edges: set[tuple[str, str]] = set()
    for a, b in deps:
        for endpoint in (a, b):
            if endpoint not in by_id:
                raise UnknownUnit(endpoint)
        edges.add((a, b))
    cov = {k: int(v) for k, v in (coverage or {}).items() if k in by_id}
    return DependencyGraph(units=by_id, edges=edges, coverage=cov)


def _check_function_sets(units: Iterable[TaskUnit]) -> None:
    seen: dict[str, list[TaskUnit]] = {}
    for unit in units:
        for other in seen.get(unit.file_path, []):
            if unit.whole_file or other.whole_file:
                raise GraphError(
                    f"{unit.unit_id!r} and {other.unit_id!r} both claim the whole of {unit.file_path!r}"
                )
            shared = set(unit.functions) & set(other.functions)
            if shared:
                raise GraphError(
                    f"{unit.unit_id!r} and {other.unit_id!r} share functions {sorted(shared)}"
                )
        seen.setdefault(unit.file_path, []).append(unit)


# -- structure ----------------------------------------------------------------


def condense_sccs(g: DependencyGraph) -> dict[str, int]:
    """Map each unit to the index of its strongly connected component.

    Indices follow a deterministic topological order of the condensed graph
    (ties broken by the smallest unit_id in each component).
    """
    comps = _tarjan(sorted(g.units), _adjacency(g))
    member_of = {uid: i for i, comp in enumerate(comps) for uid in comp}
    # order components topologically, lexicographic on smallest member
    succ: dict[int, set[int]] = {i: set() for i in range(len(comps))}
    indeg = [0] * len(comps)
    for a, b in g.edges:
        ca, cb = member_of[a], member_of[b]
        if ca != cb and cb not in succ[ca]:
            succ[ca].add(cb)
            indeg[cb] += 1
    key = [min(c) for c in comps]
    frontier = sorted((key[i], i) for i in range(len(comps)) if indeg[i] == 0)
    order: list[int] = []
    while frontier:
        _, c = frontier.pop(0)
        order.append(c)
        for d in succ[c]:
            indeg[d] -= 1
            if indeg[d] == 0:
                frontier.append((key[d], d))
        frontier.sort()
    rank = {c: r for r, c in enumerate(order)}
    return {uid: rank[member_of[uid]] for uid in g.units}


def _adjacency(g: DependencyGraph) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {uid: [] for uid in g.units}
    for a, b in sorted(g.edges):
        adj[a].append(b)
    return adj


def _tarjan(nodes: list[str], adj: Mapping[str, list[str]]) -> list[list[str]]:
    # iterative form; recursion depth is unbounded on long chains
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    comps: list[list[str]] = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            recurse = False
            nbrs = adj[v]
            while i < len(nbrs):
                w = nbrs[i]
                i += 1
                if w not in index:
                    work.append((v, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return comps


def upstream_depths(g: DependencyGraph, scc: Mapping[str, int] | None = None) -> dict[str, int]:
    """Longest path length from any source to each unit, measured on the condensed DAG."""
    scc = scc if scc is not None else condense_sccs(g)
    depth_of_comp: dict[int, int] = {c: 0 for c in scc.values()}
    cedges = sorted({(scc[a], scc[b]) for a, b in g.edges if scc[a] != scc[b]})
    # component indices are already topologically ordered
    for a, b in sorted(cedges, key=lambda e: e[0]):
        depth_of_comp[b] = max(depth_of_comp[b], depth_of_comp[a] + 1)
    return {uid: depth_of_comp[c] for uid, c in scc.items()}


def priority_key(g: DependencyGraph, unit_id: str, depths: Mapping[str, int]) -> tuple:
    unit = g.units[unit_id]
    return (-g.coverage_weight(unit_id), depths[unit_id], unit.complexity.weight, unit_id)


# -- scheduling ---------------------------------------------------------------


def ready_units(g: DependencyGraph) -> list[str]:
    """Pending units whose predecessors are all completed, highest priority first.

    Edges internal to a strongly connected component are ignored, so members of
    a dependency cycle become ready together once their external inputs are in.
    """
    scc = condense_sccs(g)
    blocked: set[str] = set()
    for a, b in g.edges:
        if scc[a] != scc[b] and a not in g.completed:
            blocked.add(b)
    ready = [
        uid for uid, u in g.units.items() if u.status is UnitStatus.PENDING and uid not in blocked
    ]
    depths = upstream_depths(g, scc)
    return sorted(ready, key=lambda uid: priority_key(g, uid, depths))


def is_ready(g: DependencyGraph, unit_id: str) -> bool:
    return unit_id in ready_units(g)


def complete_unit(g: DependencyGraph, unit_id: str) -> DependencyGraph:
    """Record that a verified unit has been merged into main."""
    g.set_status(unit_id, UnitStatus.INTEGRATED)
    g.completed.add(unit_id)
    return g


def partition_major_groups(g: DependencyGraph, n: int) -> list[MajorTaskGroup]:
    """Split the units into at most ``n`` groups of balanced complexity weight.

    Whole strongly connected components are placed greedily, heaviest first,
    onto the currently lightest group.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scc = condense_sccs(g)
    comps: dict[int, list[str]] = {}
    for uid in sorted(g.units):
        comps.setdefault(scc[uid], []).append(uid)
    weights = {c: sum(g.units[u].complexity.weight for u in members) for c, members in comps.items()}
    k = max(1, min(n, len(comps)))
    loads = [0] * k
    members: list[list[str]] = [[] for _ in range(k)]
    for c in sorted(comps, key=lambda c: (-weights[c], c)):
        target = min(range(k), key=lambda i: (loads[i], i))
        loads[target] += weights[c]
        members[target].extend(comps[c])
    depths = upstream_depths(g, scc)
    return [
        MajorTaskGroup(
            group_id=f"group-{i + 1}",
            unit_ids=sorted(ms, key=lambda uid: (depths[uid], uid)),
        )
        for i, ms in enumerate(members)
    ]


def next_task(g: DependencyGraph, group: MajorTaskGroup) -> str | None:
    wanted = set(group.unit_ids)
    for uid in ready_units(g):
        if uid in wanted:
            return uid
    return None
