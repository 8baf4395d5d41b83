"""Cost-minimal term selection from an e-graph, plus the destructive greedy baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import ir
from .egraph import EClassId, EGraph, ENode, node_key
from .ir import Graph, GraphNode
from .sbp import DistributedType


class ExtractionError(Exception):
    pass


class Infeasible(ExtractionError):
    pass


CostFn = Callable[[EClassId, ENode], float]
FeasibilityFn = Callable[[dict[EClassId, ENode]], bool]


@dataclass
class ExtractionProblem:
    egraph: EGraph
    roots: list[EClassId]
    cost_fn: CostFn
    feasibility: Optional[FeasibilityFn] = None  # checked on complete selections
    step_feasible: Optional[Callable[[EClassId, ENode], bool]] = None  # sound per-step prune
    memory_limit: Optional[int] = None  # per-device bytes, enforced via feasibility


@dataclass
class ExtractionResult:
    graph: Graph
    total_cost: float
    selection: dict[EClassId, ENode]
    class_to_node: dict[EClassId, int]


def _reachable_classes(eg: EGraph, roots: Sequence[EClassId]) -> set[EClassId]:
    seen: set[EClassId] = set()
    stack = [eg.find(r) for r in roots]
    while stack:
        cid = stack.pop()
        if cid in seen:
            continue
        seen.add(cid)
        for n in eg.classes[cid].nodes:
            stack.extend(eg.find(c) for c in n.children)
    return seen


def _greedy_seed(eg: EGraph, roots: list[EClassId], universe: set[EClassId],
                 cost_fn: CostFn, step_feasible=None) -> Optional[dict[EClassId, ENode]]:
    """Bellman fixpoint with strict-improvement witnesses; acyclic by construction."""
    tree_cost: dict[EClassId, float] = {c: math.inf for c in universe}
    witness: dict[EClassId, ENode] = {}
    changed = True
    while changed:
        changed = False
        for cid in sorted(universe):
            for n in eg.nodes_of(cid):
                if step_feasible is not None and not step_feasible(cid, n):
                    continue
                kids = [eg.find(c) for c in n.children]
                if any(tree_cost[k] == math.inf for k in kids):
                    continue
                cand = cost_fn(cid, n) + sum(tree_cost[k] for k in kids)
                if cand < tree_cost[cid] - 1e-15:
                    tree_cost[cid] = cand
                    witness[cid] = n
                    changed = True
    if any(tree_cost[eg.find(r)] == math.inf for r in roots):
        return None
    sel: dict[EClassId, ENode] = {}
    stack = [eg.find(r) for r in roots]
    while stack:
        cid = stack.pop()
        if cid in sel:
            continue
        sel[cid] = witness[cid]
        stack.extend(eg.find(c) for c in witness[cid].children)
    return sel


def _selection_cost(eg: EGraph, sel: dict[EClassId, ENode], cost_fn: CostFn) -> float:
    return sum(cost_fn(cid, n) for cid, n in sel.items())


def _creates_cycle(eg: EGraph, sel: dict[EClassId, ENode], cid: EClassId, node: ENode) -> bool:
    targets = {eg.find(c) for c in node.children}
    seen: set[EClassId] = set()
    stack = list(targets)
    while stack:
        c = stack.pop()
        if c == cid:
            return True
        if c in seen or c not in sel:
            continue
        seen.add(c)
        stack.extend(eg.find(ch) for ch in sel[c].children)
    return False


def extract(p: ExtractionProblem) -> ExtractionResult:
    """Exact minimum-DAG-cost selection via branch-and-bound.

    One e-node is chosen per needed class; shared classes are paid once.  The
    admissible bound is the sum of per-class minimum node costs over classes
    still pending.  Ties break toward smaller class ids and lexicographically
    smaller nodes through the deterministic candidate ordering.
    """
    eg = p.egraph
    roots = sorted({eg.find(r) for r in p.roots})
    universe = _reachable_classes(eg, roots)
    min_cost = {c: min(p.cost_fn(c, n) for n in eg.nodes_of(c)) for c in universe}

    best_sel: Optional[dict[EClassId, ENode]] = None
    best_cost = math.inf
    seed = _greedy_seed(eg, roots, universe, p.cost_fn, p.step_feasible)
    if seed is not None and (p.feasibility is None or p.feasibility(seed)):
        best_sel = seed
        best_cost = _selection_cost(eg, seed, p.cost_fn)

    candidates: dict[EClassId, list[tuple[float, ENode]]] = {
        c: sorted(((p.cost_fn(c, n), n) for n in eg.nodes_of(c)), key=lambda t: (t[0], node_key(t[1])))
        for c in universe
    }

    def recurse(sel: dict[EClassId, ENode], pending: set[EClassId], cost: float) -> None:
        nonlocal best_sel, best_cost
        bound = cost + sum(min_cost[c] for c in pending)
        if bound >= best_cost - 1e-12:
            return
        if not pending:
            if p.feasibility is None or p.feasibility(sel):
                best_cost = cost
                best_sel = dict(sel)
            return
        cid = min(pending)
        rest = pending - {cid}
        for c_cost, node in candidates[cid]:
            if p.step_feasible is not None and not p.step_feasible(cid, node):
                continue
            if _creates_cycle(eg, sel, cid, node):
                continue
            sel[cid] = node
            new_pending = rest | {
                eg.find(ch) for ch in node.children if eg.find(ch) not in sel
            }
            recurse(sel, new_pending, cost + c_cost)
            del sel[cid]

    recurse({}, set(roots), 0.0)

    if best_sel is None:
        raise Infeasible("no acyclic derivation satisfies the constraints")
    graph, class_to_node = selection_to_graph(eg, best_sel, roots)
    return ExtractionResult(graph, best_cost, best_sel, class_to_node)


def selection_to_graph(eg: EGraph, sel: dict[EClassId, ENode],
                       roots: Sequence[EClassId]) -> tuple[Graph, dict[EClassId, int]]:
    """Materialize the chosen derivation as a Graph (children-first topo order)."""
    order: list[EClassId] = []
    mark: dict[EClassId, int] = {}

    def visit(cid: EClassId) -> None:
        cid = eg.find(cid)
        state = mark.get(cid, 0)
        if state == 2:
            return
        if state == 1:
            raise ExtractionError("cyclic selection")
        mark[cid] = 1
        for ch in sel[cid].children:
            visit(ch)
        mark[cid] = 2
        order.append(cid)

    for r in sorted({eg.find(r) for r in roots}):
        visit(r)

    g = Graph()
    ids: dict[EClassId, int] = {}
    for i, cid in enumerate(order):
        node = sel[cid]
        ty = eg.type_of(cid)
        dist = None
        if isinstance(ty, DistributedType):
            dist = ty
            logical = ty.logical
        else:
            logical = ty
        gn = GraphNode(i, node.op, tuple(ids[eg.find(c)] for c in node.children), logical, dist)
        g.nodes.append(gn)
        ids[cid] = i
        if isinstance(node.op, ir.Input):
            g.inputs.append(i)
    g.outputs = [ids[eg.find(r)] for r in sorted({eg.find(r) for r in roots})]
    return g, ids


# ---------------------------------------------------------------------------
# Cost helpers


def roofline_cost_fn(eg: EGraph, hw) -> CostFn:
    from .costs import roofline_cost

    def fn(cid: EClassId, n: ENode) -> float:
        if isinstance(n.op, (ir.Input, ir.Constant)):
            return 0.0
        in_types = [eg.type_of(c) for c in n.children]
        return roofline_cost(n.op, in_types, eg.type_of(cid), hw)

    return fn


def unit_transpose_cost_fn() -> CostFn:
    """Cost 1 per Transpose node, 0 otherwise (phase-ordering demonstrations)."""

    def fn(cid: EClassId, n: ENode) -> float:
        return 1.0 if isinstance(n.op, ir.Transpose) else 0.0

    return fn


# ---------------------------------------------------------------------------
# Destructive greedy baseline


def _rewrite_once(g: Graph, rule_name: str) -> Optional[Graph]:
    """Apply `rule_name` destructively at its first match, or None when unmatched."""
    idx = {n.id: n for n in g.nodes}

    def rebuild_with(target: int, build) -> Graph:
        out = Graph()
        mapping: dict[int, int] = {}
        for n in g.nodes:
            if n.id == target:
                mapping[n.id] = build(out, mapping)
            else:
                mapping[n.id] = out.add(n.op, [mapping[i] for i in n.inputs])
        out.outputs = [mapping[o] for o in g.outputs]
        return prune_dead(out)

    for n in g.nodes:
        op = n.op
        if rule_name == "FoldNopTrans" and isinstance(op, ir.Transpose):
            if op.perm == tuple(range(len(op.perm))):
                return rebuild_with(n.id, lambda out, m: m[n.inputs[0]])
        elif rule_name == "FoldTwoTrans" and isinstance(op, ir.Transpose):
            inner = idx[n.inputs[0]]
            if isinstance(inner.op, ir.Transpose):
                perm = ir.perm_compose(inner.op.perm, op.perm)
                return rebuild_with(
                    n.id, lambda out, m: out.add(ir.Transpose(perm), [m[inner.inputs[0]]])
                )
        elif rule_name == "CombineUnaryTrans" and isinstance(op, ir.Unary):
            inner = idx[n.inputs[0]]
            if isinstance(inner.op, ir.Transpose):
                def build(out, m, op=op, inner=inner):
                    u = out.add(op, [m[inner.inputs[0]]])
                    return out.add(ir.Transpose(inner.op.perm), [u])
                return rebuild_with(n.id, build)
        elif rule_name in ("CombineBinaryLeftTrans", "CombineBinaryRightTrans") and isinstance(
            op, ir.Binary
        ):
            side = 0 if rule_name == "CombineBinaryLeftTrans" else 1
            t_node = idx[n.inputs[side]]
            if isinstance(t_node.op, ir.Transpose):
                def build(out, m, op=op, side=side, t_node=t_node, n=n):
                    inv = ir.perm_inverse(t_node.op.perm)
                    moved = out.add(ir.Transpose(inv), [m[n.inputs[1 - side]]])
                    args = [m[t_node.inputs[0]], moved] if side == 0 else [moved, m[t_node.inputs[0]]]
                    b = out.add(op, args)
                    return out.add(ir.Transpose(t_node.op.perm), [b])
                return rebuild_with(n.id, build)
    return None


def prune_dead(g: Graph) -> Graph:
    """Drop nodes unreachable from the outputs."""
    idx = {n.id: n for n in g.nodes}
    live: set[int] = set()
    stack = list(g.outputs)
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        stack.extend(idx[nid].inputs)
    out = Graph()
    mapping: dict[int, int] = {}
    for n in g.nodes:
        if n.id in live:
            mapping[n.id] = out.add(n.op, [mapping[i] for i in n.inputs])
    out.outputs = [mapping[o] for o in g.outputs]
    return out


def greedy_extract(g: Graph, order: Sequence[str], max_steps: int = 100) -> Graph:
    """Suboptimal baseline: apply each named rule destructively to fixpoint, in order."""
    cur = prune_dead(g)
    for rule_name in order:
        for _ in range(max_steps):
            nxt = _rewrite_once(cur, rule_name)
            if nxt is None:
                break
            cur = nxt
    return cur


def count_ops(g: Graph, op_type: type) -> int:
    return sum(1 for n in g.nodes if isinstance(n.op, op_type))


# ---------------------------------------------------------------------------
# Pseudo-boolean encoding emitter (for cross-checking with external solvers)


def emit_pseudo_boolean(p: ExtractionProblem) -> str:
    """OPB-format encoding of the selection problem.

    Variables: x_{c}_{i} (node i of class c selected), n_{c} (class needed),
    and a binary-encoded topological level per class for acyclicity.  Hard
    constraints: roots needed; a needed class selects exactly one node; a
    selected node needs its children; a selected edge strictly decreases the
    level.  The objective minimizes the integer-scaled node costs, matching
    the DAG objective (each class paid once).
    """
    eg = p.egraph
    roots = sorted({eg.find(r) for r in p.roots})
    universe = sorted(_reachable_classes(eg, roots))
    node_lists = {c: eg.nodes_of(c) for c in universe}

    n_classes = len(universe)
    bits = max(1, (n_classes - 1).bit_length())
    big_m = 1 << bits

    costs = {}
    for c in universe:
        for i, n in enumerate(node_lists[c]):
            costs[(c, i)] = p.cost_fn(c, n)
    scale = 10 ** 9

    lines = []
    terms = " ".join(
        f"+{int(round(v * scale))} x_{c}_{i}" for (c, i), v in sorted(costs.items()) if v > 0
    )
    lines.append(f"min: {terms} ;" if terms else "min: ;")

    def level_terms(c: int, sign: int) -> str:
        return " ".join(f"{'+' if sign > 0 else '-'}{1 << k} l_{c}_{k}" for k in range(bits))

    for r in roots:
        lines.append(f"+1 n_{r} = 1 ;")
    for c in universe:
        sel = " ".join(f"+1 x_{c}_{i}" for i in range(len(node_lists[c])))
        lines.append(f"{sel} -1 n_{c} = 0 ;")  # needed <=> exactly one node
        for i, node in enumerate(node_lists[c]):
            for ch in sorted({eg.find(k) for k in node.children}):
                lines.append(f"+1 n_{ch} -1 x_{c}_{i} >= 0 ;")
                # level[c] >= level[ch] + 1 when x selected (acyclicity):
                lines.append(
                    f"{level_terms(c, +1)} {level_terms(ch, -1)} "
                    f"+{big_m} ~x_{c}_{i} >= 1 ;"
                )
    header = (
        f"* #variable= {sum(len(v) for v in node_lists.values()) + n_classes * (1 + bits)}"
        f" #constraint= {len(lines) - 1}\n"
    )
    return header + "\n".join(lines) + "\n"
