"""Hashconsed e-graph with union-find, deferred congruence repair, and saturation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import ir
from .ir import infer_type


class EGraphError(Exception):
    pass


class TypeMismatch(EGraphError):
    pass


EClassId = int


@dataclass(frozen=True)
class ENode:
    op: ir.Op
    children: tuple[EClassId, ...] = ()


def node_key(n: ENode) -> tuple:
    """Deterministic sort key for dumps and tie-breaking."""
    return (type(n.op).__name__, repr(n.op), n.children)


@dataclass
class EClass:
    id: EClassId
    nodes: set[ENode] = field(default_factory=set)
    type: object = None  # TensorType, or DistributedType in distributed e-graphs
    analysis: object = None


def _default_type_of(op: ir.Op, child_types: Sequence[object]) -> object:
    return infer_type(op, child_types)


class EGraph:
    """Congruence structure over ENodes.

    Types are e-class analysis data: computed when a node is added, checked on
    union.  Congruence repair is deferred to rebuild() so rule application
    stays linear in the number of matches.
    """

    def __init__(self, type_of: Callable[[ir.Op, Sequence[object]], object] = _default_type_of):
        self._type_of = type_of
        self._parent: dict[EClassId, EClassId] = {}
        self.classes: dict[EClassId, EClass] = {}
        self.hashcons: dict[ENode, EClassId] = {}
        self._uses: dict[EClassId, list[tuple[ENode, EClassId]]] = {}
        self._dirty: list[EClassId] = []
        self._next_id = 0
        self.version = 0  # bumps on any new node or effective union

    # -- union-find ---------------------------------------------------------

    def find(self, a: EClassId) -> EClassId:
        while self._parent[a] != a:
            self._parent[a] = self._parent[self._parent[a]]
            a = self._parent[a]
        return a

    def canonicalize(self, n: ENode) -> ENode:
        return ENode(n.op, tuple(self.find(c) for c in n.children))

    # -- construction -------------------------------------------------------

    def add(self, n: ENode) -> EClassId:
        n = self.canonicalize(n)
        if n in self.hashcons:
            return self.find(self.hashcons[n])
        child_types = [self.classes[c].type for c in n.children]
        ty = self._type_of(n.op, child_types)
        cid = self._next_id
        self._next_id += 1
        self._parent[cid] = cid
        self.classes[cid] = EClass(cid, {n}, ty)
        self.hashcons[n] = cid
        for c in set(n.children):
            self._uses.setdefault(c, []).append((n, cid))
        self.version += 1
        return cid

    def add_term(self, op: ir.Op, children: Sequence[EClassId] = ()) -> EClassId:
        return self.add(ENode(op, tuple(children)))

    def union(self, a: EClassId, b: EClassId) -> EClassId:
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        ca, cb = self.classes[a], self.classes[b]
        if ca.type != cb.type:
            raise TypeMismatch(f"union of {ca.type} with {cb.type}")
        if len(ca.nodes) < len(cb.nodes):
            a, b, ca, cb = b, a, cb, ca
        self._parent[b] = a
        ca.nodes |= cb.nodes
        if ca.analysis is None:
            ca.analysis = cb.analysis
        self._uses.setdefault(a, []).extend(self._uses.pop(b, []))
        del self.classes[b]
        self._dirty.append(a)
        self.version += 1
        return a

    def rebuild(self) -> int:
        """Restore congruence after unions; returns the number of upward merges."""
        merges = 0
        while self._dirty:
            todo = {self.find(c) for c in self._dirty}
            self._dirty.clear()
            for cid in todo:
                for old_node, owner in list(self._uses.get(cid, [])):
                    canon = self.canonicalize(old_node)
                    owner = self.find(owner)
                    if old_node in self.hashcons:
                        del self.hashcons[old_node]
                    prev = self.hashcons.get(canon)
                    if prev is not None and self.find(prev) != owner:
                        self.union(owner, self.find(prev))
                        merges += 1
                    self.hashcons[canon] = self.find(owner)
                    if canon != old_node:
                        cls = self.classes[self.find(owner)]
                        cls.nodes.discard(old_node)
                        cls.nodes.add(canon)
                        for c in set(canon.children):
                            self._uses.setdefault(self.find(c), []).append((canon, self.find(owner)))
        return merges

    # -- inspection ---------------------------------------------------------

    def class_ids(self) -> list[EClassId]:
        return sorted(self.classes)

    def node_count(self) -> int:
        return sum(len(c.nodes) for c in self.classes.values())

    def nodes_of(self, cid: EClassId) -> list[ENode]:
        return sorted(self.classes[self.find(cid)].nodes, key=node_key)

    def type_of(self, cid: EClassId) -> object:
        return self.classes[self.find(cid)].type

    def dump(self) -> str:
        """Deterministic textual listing for golden tests."""
        lines = []
        for cid in self.class_ids():
            c = self.classes[cid]
            lines.append(f"class {cid}: {c.type}")
            for n in sorted(c.nodes, key=node_key):
                args = ", ".join(str(self.find(ch)) for ch in n.children)
                lines.append(f"  {n.op!r}({args})")
        return "\n".join(lines)

    def to_dot(self) -> str:
        """DOT rendering with dashed boxes per e-class."""
        lines = ["digraph egraph {", "  compound=true;", "  node [shape=record];"]
        for cid in self.class_ids():
            c = self.classes[cid]
            lines.append(f"  subgraph cluster_{cid} {{")
            lines.append('    style=dashed;')
            lines.append(f'    label="c{cid}: {c.type}";')
            for i, n in enumerate(sorted(c.nodes, key=node_key)):
                label = repr(n.op).replace('"', "'")
                lines.append(f'    n{cid}_{i} [label="{label}"];')
            lines.append("  }")
        for cid in self.class_ids():
            for i, n in enumerate(sorted(self.classes[cid].nodes, key=node_key)):
                for ch in n.children:
                    lines.append(f"  n{cid}_{i} -> n{self.find(ch)}_0 [lhead=cluster_{self.find(ch)}];")
        lines.append("}")
        return "\n".join(lines)

    def reachable_terms_ok(self, roots: Iterable[EClassId]) -> bool:
        """Every class reachable from the roots can produce a finite term."""
        productive: set[EClassId] = set()
        changed = True
        while changed:
            changed = False
            for cid, c in self.classes.items():
                if cid in productive:
                    continue
                for n in c.nodes:
                    if all(self.find(ch) in productive for ch in n.children):
                        productive.add(cid)
                        changed = True
                        break
        reach: set[EClassId] = set()
        stack = [self.find(r) for r in roots]
        while stack:
            cid = stack.pop()
            if cid in reach:
                continue
            reach.add(cid)
            for n in self.classes[cid].nodes:
                stack.extend(self.find(ch) for ch in n.children)
        return reach <= productive


def add_graph(eg: EGraph, g: ir.Graph) -> dict[int, EClassId]:
    """Insert a whole graph; returns node id -> e-class id."""
    memo: dict[int, EClassId] = {}
    for nid in ir.topo_order(g):
        n = g.node(nid)
        memo[nid] = eg.add_term(n.op, [memo[i] for i in n.inputs])
    return memo


@dataclass
class SaturationReport:
    iterations: int
    node_count: int
    saturated: bool


@dataclass
class Limits:
    max_iters: int = 30
    max_nodes: int = 50_000

    def __post_init__(self) -> None:
        if self.max_iters <= 0 or self.max_nodes <= 0:
            raise EGraphError("limits must be positive")


def saturate(eg: EGraph, rules: Sequence, limits: Limits | None = None) -> SaturationReport:
    """Apply all rules to fixpoint or until a limit is hit.

    Each iteration matches every rule against the pre-iteration snapshot, then
    applies all matches and rebuilds.  `iterations` counts productive passes;
    saturation is proven by one pass that changes nothing.
    """
    from .rules import apply_all

    limits = limits or Limits()
    iters = 0
    while True:
        before = eg.version
        apply_all(eg, rules)
        if eg.version == before:
            return SaturationReport(iters, eg.node_count(), True)
        iters += 1
        if iters >= limits.max_iters or eg.node_count() > limits.max_nodes:
            return SaturationReport(iters, eg.node_count(), False)
