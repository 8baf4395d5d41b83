"""Tiered tile graphs: hierarchical loop structure with merge/reorder actions.

Levels run 0 (innermost, one microkernel-wrapped operator each) to
num_levels-1 (outermost memory).  Iteration variables are global names shared
across operators; a loop at one level relates to the parent's loop of the same
name (the affine slicing relation).  Nesting encodes fusion: merging src into
dst at level n moves src's level-(n-1) subtree under dst's level-n node.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from . import ir
from .ir import Graph, topo_order


class ScheduleError(Exception):
    pass


class IllegalMerge(ScheduleError):
    pass


class BadPermutation(ScheduleError):
    pass


@dataclass(frozen=True)
class TileNode:
    """One tile at one memory level; owner is the op whose column it anchors."""

    owner: int  # logical op id
    level: int
    loops: tuple[str, ...]  # ordered outermost-first
    children: tuple["TileNode", ...] = ()


@dataclass(frozen=True)
class BufferSpec:
    name: str
    dims: tuple[str, ...]
    elem_bytes: int
    is_io: bool  # graph input or output (pinned to the outermost memory)
    source: Optional[str] = None  # feeding Input op name, when the buffer is one


@dataclass(frozen=True)
class OpInfo:
    op_id: int
    kind: str  # costs.OP_KIND_NAMES entry
    fn: str  # unary/binary sub-kind, "" otherwise
    unit: str
    dims: tuple[str, ...]  # iteration space, canonical order
    reads: tuple[str, ...]  # buffer names read
    writes: tuple[str, ...]  # buffer names written (exactly one)
    flops_per_point: int


@dataclass(frozen=True)
class TieredTileGraph:
    num_levels: int
    roots: tuple[TileNode, ...]  # topologically sorted top-level nodes
    ops: tuple[OpInfo, ...]
    buffers: tuple[BufferSpec, ...]
    dim_extents: tuple[tuple[str, int], ...]
    op_edges: tuple[tuple[int, int], ...]  # (producer op, consumer op)

    def extent(self, dim: str) -> int:
        return dict(self.dim_extents)[dim]

    def op_info(self, op_id: int) -> OpInfo:
        return next(o for o in self.ops if o.op_id == op_id)

    def buffer(self, name: str) -> BufferSpec:
        return next(b for b in self.buffers if b.name == name)

    def find_node(self, owner: int, level: int) -> Optional[TileNode]:
        for node in self.walk():
            if node.owner == owner and node.level == level:
                return node
        return None

    def walk(self) -> Iterable[TileNode]:
        stack = list(self.roots)
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children)

    def chain_of(self, op_id: int) -> list[TileNode]:
        """Ancestor chain for the op's column, outermost first, ending at its leaf."""

        def descend(node: TileNode, path: list[TileNode]) -> Optional[list[TileNode]]:
            path = path + [node]
            if node.level == 0:
                return path if node.owner == op_id else None
            for ch in node.children:
                found = descend(ch, path)
                if found is not None:
                    return found
            return None

        for root in self.roots:
            found = descend(root, [])
            if found is not None:
                return found
        raise ScheduleError(f"op {op_id} not present")

    def subtree_ops(self, node: TileNode) -> set[int]:
        if node.level == 0:
            return {node.owner}
        out: set[int] = set()
        for ch in node.children:
            out |= self.subtree_ops(ch)
        return out

    def notation(self) -> str:
        """Tile-centric textual form: Op_i^n = {loops}(children)."""
        lines = []

        def render(node: TileNode) -> str:
            return f"Op_{node.owner}^{node.level}"

        by_level: dict[int, list[TileNode]] = {}
        for node in self.walk():
            by_level.setdefault(node.level, []).append(node)
        for level in sorted(by_level, reverse=True):
            parts = []
            for node in sorted(by_level[level], key=lambda n: n.owner):
                loops = ",".join(f"{l}^{level}" for l in node.loops)
                kids = ", ".join(render(c) for c in node.children)
                body = kids if node.level > 0 else self.op_info(node.owner).kind
                parts.append(f"{render(node)}={{{loops}}}({body})")
            lines.append(f"Level {level}: " + "  ".join(parts))
        return "\n".join(lines)

    def state_key(self) -> str:
        def render(node: TileNode) -> str:
            kids = ",".join(render(c) for c in node.children)
            return f"{node.owner}^{node.level}{list(node.loops)}({kids})"

        return ";".join(render(r) for r in self.roots)


# ---------------------------------------------------------------------------
# Construction from a logical graph


_SCHEDULABLE = (ir.MatMul, ir.Unary, ir.Binary)


def init_tile_graph(subgraph: Graph, num_levels: int) -> TieredTileGraph:
    """Unfused initial state: one tile node per operator per level, full loop sets."""
    if num_levels < 2:
        raise ScheduleError("need at least 2 levels")
    idx = {n.id: n for n in subgraph.nodes}
    dim_names: dict[int, tuple[str, ...]] = {}  # graph node id -> dims of its tensor
    dim_extents: dict[str, int] = {}
    counter = itertools.count()

    def fresh(extent: int) -> str:
        name = f"d{next(counter)}"
        dim_extents[name] = extent
        return name

    ops: list[OpInfo] = []
    buffers: dict[str, BufferSpec] = {}
    op_edges: list[tuple[int, int]] = []
    elem_bytes = 4

    def buffer_for(nid: int, dims: tuple[str, ...], is_io: bool) -> str:
        name = f"t{nid}"
        if name not in buffers:
            node = idx[nid]
            source = node.op.name if isinstance(node.op, ir.Input) else None
            buffers[name] = BufferSpec(name, dims, node.type.dtype.byte_width, is_io, source)
        return name

    compute_ids = []
    for nid in topo_order(subgraph):
        node = idx[nid]
        if isinstance(node.op, ir.Input) or isinstance(node.op, ir.Constant):
            dim_names[nid] = tuple(fresh(d) for d in node.type.shape)
            buffer_for(nid, dim_names[nid], True)
            continue
        if not isinstance(node.op, _SCHEDULABLE):
            raise ScheduleError(f"node {nid}: {node.op!r} is not schedulable")
        compute_ids.append(nid)

    from .costs import op_kind_name, op_unit

    for nid in compute_ids:
        node = idx[nid]
        if isinstance(node.op, ir.MatMul):
            a, b = node.inputs
            m, k = dim_names[a]
            kb, n = dim_names[b]
            # Unify B's row dim with A's column dim (the contraction variable).
            if kb != k:
                dim_names[b] = (k, n)
                buffers[f"t{b}"] = replace(buffers[f"t{b}"], dims=(k, n))
            dims = (m, k, n)
            out_dims = (m, n)
            flops_per_point = 2
        else:
            first = node.inputs[0]
            dims = dim_names[first]
            out_dims = dims
            flops_per_point = 1
            for other in node.inputs[1:]:
                if dim_names[other] != dims:
                    dim_names[other] = dims
                    buffers[f"t{other}"] = replace(buffers[f"t{other}"], dims=dims)
        dim_names[nid] = out_dims
        is_out = nid in subgraph.outputs
        out_buf = buffer_for(nid, out_dims, is_out)
        reads = tuple(f"t{i}" for i in node.inputs)
        fn = node.op.fn if isinstance(node.op, (ir.Unary, ir.Binary)) else ""
        ops.append(
            OpInfo(
                nid,
                op_kind_name(node.op),
                fn,
                op_unit(node.op, node.type),
                dims,
                reads,
                (out_buf,),
                flops_per_point,
            )
        )
        for i in node.inputs:
            if i in compute_ids:
                op_edges.append((i, nid))

    # Sanity: dim extents must match declared tensor shapes.
    for nid in compute_ids:
        names = dim_names[nid]
        for name, d in zip(names, idx[nid].type.shape):
            if dim_extents.get(name, d) != d:
                raise ScheduleError(f"inconsistent extent for {name}")
            dim_extents[name] = d

    def column(op: OpInfo) -> TileNode:
        node = TileNode(op.op_id, 0, ())
        for level in range(1, num_levels):
            node = TileNode(op.op_id, level, op.dims, (node,))
        return node

    roots = tuple(column(o) for o in ops)
    used_buffers = {b for o in ops for b in o.reads + o.writes}
    return TieredTileGraph(
        num_levels,
        roots,
        tuple(ops),
        tuple(buffers[b] for b in sorted(used_buffers)),
        tuple(sorted(dim_extents.items())),
        tuple(op_edges),
    )


# ---------------------------------------------------------------------------
# Schedule states and actions


@dataclass(frozen=True)
class Action:
    kind: str  # "merge" | "reorder"
    args: tuple

    def __repr__(self) -> str:
        return f"{self.kind}{self.args}"


@dataclass(frozen=True)
class ScheduleState:
    ttg: TieredTileGraph
    history: tuple[Action, ...] = ()

    def key(self) -> str:
        return self.ttg.state_key()


def _replace_node(node: TileNode, target: TileNode, repl: Optional[TileNode]) -> Optional[TileNode]:
    if node is target:
        return repl
    new_children = []
    changed = False
    for ch in node.children:
        out = _replace_node(ch, target, repl)
        if out is not ch:
            changed = True
        if out is not None:
            new_children.append(out)
    if not changed:
        return node
    return replace(node, children=tuple(new_children))


def merge(state: ScheduleState, src: int, dst: int, level: int) -> ScheduleState:
    """Fuse src into dst at `level`: src's children move under dst's level node."""
    ttg = state.ttg
    if src == dst:
        raise IllegalMerge("src == dst")
    if (src, dst) not in ttg.op_edges:
        raise IllegalMerge(f"op {src} does not feed op {dst}")
    src_node = ttg.find_node(src, level)
    dst_node = ttg.find_node(dst, level)
    if src_node is None or dst_node is None:
        raise IllegalMerge(f"no level-{level} nodes for ops {src}/{dst}")

    # Locate the sibling list holding both nodes (top roots or a shared parent).
    if src_node in ttg.roots and dst_node in ttg.roots:
        siblings = list(ttg.roots)
        parent = None
    else:
        parent = None
        for node in ttg.walk():
            if src_node in node.children and dst_node in node.children:
                parent = node
                break
        if parent is None:
            raise IllegalMerge("nodes are not siblings (merge outer levels first)")
        siblings = list(parent.children)

    merged_loops = tuple(dst_node.loops) + tuple(
        l for l in src_node.loops if l not in dst_node.loops
    )
    merged_children = tuple(src_node.children) + tuple(dst_node.children)
    merged = TileNode(dst, level, merged_loops, merged_children)

    new_siblings = [merged if s is dst_node else s for s in siblings if s is not src_node]

    # Sibling subtree dependencies must stay acyclic after the move.
    sib_ops = [ttg.subtree_ops(s) if s is not merged else ttg.subtree_ops(src_node) | ttg.subtree_ops(dst_node) for s in new_siblings]
    order = _topo_siblings(new_siblings, sib_ops, ttg.op_edges)

    if parent is None:
        new_ttg = replace(ttg, roots=tuple(order))
    else:
        new_parent = replace(parent, children=tuple(order))
        new_roots = []
        for r in ttg.roots:
            out = _replace_node(r, parent, new_parent)
            if out is not None:
                new_roots.append(out)
        new_ttg = replace(ttg, roots=tuple(new_roots))
    return ScheduleState(new_ttg, state.history + (Action("merge", (src, dst, level)),))


def _topo_siblings(siblings: list[TileNode], sib_ops: list[set[int]],
                   edges: tuple[tuple[int, int], ...]) -> list[TileNode]:
    n = len(siblings)
    adj: dict[int, set[int]] = {i: set() for i in range(n)}
    for p, c in edges:
        for i in range(n):
            for j in range(n):
                if i != j and p in sib_ops[i] and c in sib_ops[j]:
                    adj[i].add(j)
    done: list[int] = []
    state = {i: 0 for i in range(n)}

    def visit(i: int) -> None:
        if state[i] == 2:
            return
        if state[i] == 1:
            raise IllegalMerge("merge would create a dependency cycle")
        state[i] = 1
        for j in sorted(adj[i]):
            visit(j)
        state[i] = 2
        done.append(i)

    for i in range(n):
        visit(i)
    done.reverse()
    return [siblings[i] for i in done]


def reorder(state: ScheduleState, op_i: int, level: int, loops: Sequence[str]) -> ScheduleState:
    """Permute the loop order of tile Op_i^level; relation maps are name-based."""
    ttg = state.ttg
    node = ttg.find_node(op_i, level)
    if node is None:
        raise ScheduleError(f"no node for op {op_i} at level {level}")
    if sorted(loops) != sorted(node.loops):
        raise BadPermutation(f"{loops} is not a permutation of {node.loops}")
    new_node = replace(node, loops=tuple(loops))
    new_roots = []
    for r in ttg.roots:
        out = _replace_node(r, node, new_node)
        new_roots.append(out if out is not None else r)
    new_ttg = replace(ttg, roots=tuple(new_roots))
    return ScheduleState(new_ttg, state.history + (Action("reorder", (op_i, level, tuple(loops))),))


MAX_REORDER_LOOPS = 4


def legal_actions(state: ScheduleState) -> list[Action]:
    """All legal merges (producer into consumer) and non-identity reorders."""
    ttg = state.ttg
    out: list[Action] = []
    for src, dst in sorted(ttg.op_edges):
        for level in range(1, ttg.num_levels):
            try:
                merge(state, src, dst, level)
            except ScheduleError:
                continue
            out.append(Action("merge", (src, dst, level)))
    for node in sorted(ttg.walk(), key=lambda n: (n.owner, n.level)):
        if node.level == 0 or len(node.loops) > MAX_REORDER_LOOPS:
            continue
        for perm in itertools.permutations(node.loops):
            if perm == node.loops:
                continue
            out.append(Action("reorder", (node.owner, node.level, perm)))
    return out


def apply_action(state: ScheduleState, action: Action) -> ScheduleState:
    if action.kind == "merge":
        return merge(state, *action.args)
    if action.kind == "reorder":
        return reorder(state, *action.args)
    raise ScheduleError(f"unknown action {action!r}")


def reachable_states(root: ScheduleState, max_depth: Optional[int] = None,
                     limit: int = 100_000) -> dict[str, ScheduleState]:
    """BFS enumeration keyed by state hash (the oracle for toy-scale search)."""
    if max_depth is None:
        max_depth = 2 * len(root.ttg.ops)
    seen = {root.key(): root}
    frontier = [root]
    depth = 0
    while frontier and depth < max_depth:
        nxt: list[ScheduleState] = []
        for st in frontier:
            for action in legal_actions(st):
                child = apply_action(st, action)
                k = child.key()
                if k not in seen:
                    if len(seen) >= limit:
                        raise ScheduleError("state space exceeds enumeration limit")
                    seen[k] = child
                    nxt.append(child)
        frontier = nxt
        depth += 1
    return seen
