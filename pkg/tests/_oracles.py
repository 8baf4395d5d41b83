"""Independent oracles shared by unit and acceptance tests.

These deliberately avoid the library's optimized code paths: selections are
enumerated rather than branch-and-bounded, packings enumerate insertion
orders, and costs are recomputed from first principles.
"""
import math

import numpy as np

from minicase.egraph import EGraph
from minicase.extraction import selection_to_graph
from minicase.interp import eval_single
from minicase.memplan import _interferes


def enumerate_selections(eg: EGraph, root: int, limit: int = 200_000):
    """Every acyclic selection reachable from the root (dicts class -> node)."""
    root = eg.find(root)
    results = []

    def recurse(sel: dict, pending: set):
        if len(results) >= limit:
            raise RuntimeError("selection enumeration limit hit")
        if not pending:
            results.append(dict(sel))
            return
        cid = min(pending)
        rest = pending - {cid}
        for n in eg.nodes_of(cid):
            kids = {eg.find(c) for c in n.children}
            stack, seen, cyc = list(kids), set(), False
            while stack:
                c = stack.pop()
                if c == cid:
                    cyc = True
                    break
                if c in seen or c not in sel:
                    continue
                seen.add(c)
                stack.extend(eg.find(ch) for ch in sel[c].children)
            if cyc:
                continue
            sel[cid] = n
            recurse(sel, rest | {k for k in kids if k not in sel})
            del sel[cid]

    recurse({}, {root})
    return results


def enumerate_derivations(eg: EGraph, root: int, limit: int = 2000):
    """All acyclic derivations of the root, materialized as graphs."""
    graphs = []
    for sel in enumerate_selections(eg, root, limit):
        g, _ = selection_to_graph(eg, sel, [eg.find(root)])
        graphs.append(g)
    return graphs


def brute_force_extraction_optimum(eg: EGraph, root: int, cost_fn) -> float:
    """Minimum DAG cost over every acyclic selection (no pruning)."""
    best = math.inf
    for sel in enumerate_selections(eg, root):
        cost = sum(cost_fn(cid, n) for cid, n in sel.items())
        best = min(best, cost)
    return best


def assert_derivations_agree(g, rules, seed: int, rtol: float = 1e-6):
    """Apply `rules` once over the graph's e-graph; every derivation of the
    root must interpret identically to the original graph."""
    from minicase.egraph import add_graph
    from minicase.rules import apply_all

    rng = np.random.default_rng(seed)
    inputs = {}
    for nid in g.inputs:
        node = g.node(nid)
        shape = node.type.shape + node.type.lanes
        inputs[node.op.name] = (rng.random(shape, dtype=np.float32) - 0.5).astype(np.float32)
    ref = eval_single(g, inputs)
    eg = EGraph()
    memo = add_graph(eg, g)
    root = memo[g.outputs[0]]
    apply_all(eg, rules)
    derivations = enumerate_derivations(eg, root)
    assert len(derivations) >= 1
    scale = max(np.abs(ref).max(), 1e-30)
    for dg in derivations:
        out = eval_single(dg, inputs)
        assert np.abs(out - ref).max() / scale < rtol, "derivation diverged"


def bellman_tree_optimum(eg: EGraph, roots, cost_fn) -> float:
    """Min tree cost per class by Bellman fixpoint (equals the DAG optimum
    when no selected class is shared, as in chain-structured spaces)."""
    classes = set(eg.classes)
    cost = {c: math.inf for c in classes}
    changed = True
    while changed:
        changed = False
        for cid in sorted(classes):
            for n in eg.nodes_of(cid):
                kids = [eg.find(c) for c in n.children]
                if any(cost[k] == math.inf for k in kids):
                    continue
                cand = cost_fn(cid, n) + sum(cost[k] for k in kids)
                if cand < cost[cid] - 1e-18:
                    cost[cid] = cand
                    changed = True
    return sum(cost[eg.find(r)] for r in roots)


def brute_force_pack_min(buffers, sizes) -> int:
    """Min strip height over insertion orders with lowest-feasible placement.

    Complete search: every optimal layout is reproducible by its offset-sorted
    insertion order.  Interchangeable buffers (same size and interval) branch
    once, and the search stops at the clique lower bound.
    """
    from minicase.memplan import clique_lower_bound

    best = sum(sizes.values())
    lb = clique_lower_bound(buffers, alignment=1)

    def lowest(b, placed, offsets):
        neighbors = [o for o in placed if _interferes(b, o)]
        for cand in sorted({0} | {offsets[o.id] + sizes[o.id] for o in neighbors}):
            if all(
                cand + sizes[b.id] <= offsets[o.id] or offsets[o.id] + sizes[o.id] <= cand
                for o in neighbors
            ):
                return cand
        raise AssertionError("unbounded strip must fit")

    def go(remaining, placed, offsets, height):
        nonlocal best
        if height >= best or best <= lb:
            return
        if not remaining:
            best = height
            return
        tried = set()
        for i, b in enumerate(remaining):
            sig = (sizes[b.id], b.first_def, b.last_use)
            if sig in tried:
                continue
            tried.add(sig)
            off = lowest(b, placed, offsets)
            offsets[b.id] = off
            placed.append(b)
            go(remaining[:i] + remaining[i + 1 :], placed, offsets, max(height, off + sizes[b.id]))
            placed.pop()
            del offsets[b.id]

    go(list(buffers), [], {}, 0)
    return best
