"""Distributed strategy search space over the e-graph: signatures, boxing, memory."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import ir
from .costs import HardwareSpec, comm_cost, roofline_cost, wire_bytes
from .egraph import EClassId, EGraph, ENode
from .extraction import ExtractionProblem, ExtractionResult, extract
from .ir import Graph, TensorType, topo_order
from .sbp import B, Broadcast, DistributedType, NdSbp, P, Partial, Placement, Sbp, Split


class DistributionError(Exception):
    pass


class NoStrategy(DistributionError):
    pass


# ---------------------------------------------------------------------------
# SBP signatures (per mesh dim; dims act orthogonally)


def _dim_signature(op: ir.Op, in_sbps: Sequence[Sbp], in_types: Sequence[TensorType]) -> Optional[Sbp]:
    """Output SBP for one mesh dim, or None when the combination is invalid.

    Partial combinations are the oracle-verified set: addition-like ops pass
    Partial through both operands (per-device sums add), multiplication passes
    it through exactly one (the replicated factor distributes over the sum).
    """
    if isinstance(op, ir.Binary):
        a, b = in_sbps
        if isinstance(a, Split) and a == b:
            return a
        if a == B and b == B:
            return B
        if op.fn in ("add", "sub"):
            if a == P and b == P:
                return P
        elif op.fn == "mul":
            if (a == P and b == B) or (a == B and b == P):
                return P
        return None

    if isinstance(op, ir.Unary):
        s = in_sbps[0]
        if isinstance(s, Split) or s == B:
            return s
        if s == P and op.fn == "neg":  # only linear unaries pass Partial through
            return P
        return None

    if isinstance(op, ir.MatMul):
        a, b = in_sbps
        ta, tb = in_types
        if ta.rank != 2 or tb.rank != 2 or ta.lanes or tb.lanes:
            return B if a == B and b == B else None
        if a == Split(0) and b == B:
            return Split(0)
        if a == B and b == Split(1):
            return Split(1)
        if a == Split(1) and b == Split(0):
            return P
        if a == B and b == B:
            return B
        return None

    if isinstance(op, ir.Transpose):
        s = in_sbps[0]
        if isinstance(s, Split):
            return Split(op.perm.index(s.axis))
        return s

    if isinstance(op, (ir.Pack, ir.Unpack)):
        s = in_sbps[0]
        if isinstance(s, Split):
            return Split(s.axis) if s.axis < len(in_types[0].shape) else None
        return s

    if isinstance(op, (ir.Reshape, ir.Slice)):
        s = in_sbps[0]
        return s if s in (B, P) else None

    return None


def signature_output(op: ir.Op, in_ndsbps: Sequence[NdSbp],
                     in_types: Sequence[TensorType]) -> Optional[NdSbp]:
    """Multi-dim output NdSbp from per-dim signatures, or None when invalid."""
    n_dims = len(in_ndsbps[0].entries)
    out_entries = []
    for d in range(n_dims):
        dim_in = [nd.entries[d] for nd in in_ndsbps]
        out = _dim_signature(op, dim_in, in_types)
        if out is None:
            return None
        out_entries.append(out)
    return NdSbp(tuple(out_entries))


def signatures(op: ir.Op, in_types: Sequence[TensorType],
               placement: Placement) -> dict[tuple[NdSbp, ...], NdSbp]:
    """All valid (input NdSbps -> output NdSbp) entries for `op` under `placement`."""
    per_input = [input_sbps(t, placement, allow_partial=True) for t in in_types]
    table: dict[tuple[NdSbp, ...], NdSbp] = {}
    for combo in itertools.product(*per_input):
        out = signature_output(op, combo, in_types)
        if out is None:
            continue
        try:
            out_ty = ir.infer_type(op, list(in_types))
            DistributedType(out_ty, placement, out)
        except (ir.IrError, ValueError):
            continue
        table[tuple(combo)] = out
    return table


def input_sbps(ty: TensorType, placement: Placement, allow_partial: bool = False) -> list[NdSbp]:
    """Feasible NdSbps for materializing a host tensor on the mesh.

    Mesh dims of size 1 are degenerate: only Broadcast is offered there.
    """
    per_dim: list[list[Sbp]] = []
    for mesh in placement.dims:
        if mesh == 1:
            per_dim.append([B])
            continue
        opts: list[Sbp] = [B] + [Split(a) for a in range(ty.rank)]
        if allow_partial:
            opts.append(P)
        per_dim.append(opts)
    out = []
    for combo in itertools.product(*per_dim):
        nd = NdSbp(tuple(combo))
        try:
            DistributedType(ty, placement, nd)
        except ValueError:
            continue
        out.append(nd)
    return out


# ---------------------------------------------------------------------------
# Boxing lowering and costs


@dataclass(frozen=True)
class BoxStep:
    dim: int  # mesh dim, or -1 for host<->mesh movement
    kind: str  # collective name from costs.COLLECTIVES
    payload_bytes: int
    wire_bytes: int
    participants: int
    result_entry: Optional[Sbp]


def _payload_at_dim(logical: TensorType, entries: Sequence[Sbp], placement: Placement,
                    dim: int) -> int:
    """Bytes handled by one dim-`dim` device group: full bytes over other dims' splits."""
    denom = 1
    for d, e in enumerate(entries):
        if d != dim and isinstance(e, Split):
            denom *= placement.dims[d]
    return logical.byte_size // denom


def _dim_steps(logical: TensorType, entries: list[Sbp], placement: Placement, dim: int,
               dst: Sbp) -> list[BoxStep]:
    src = entries[dim]
    mesh = placement.dims[dim]
    if src == dst:
        return []
    payload = _payload_at_dim(logical, entries, placement, dim)
    mk = lambda kind, result: BoxStep(
        dim, kind, payload, wire_bytes(kind, payload, mesh), mesh, result
    )
    if isinstance(src, Partial) and isinstance(dst, Broadcast):
        return [mk("AllReduce", B)]
    if isinstance(src, Split) and isinstance(dst, Broadcast):
        return [mk("AllGather", B)]
    if isinstance(src, Broadcast) and isinstance(dst, Split):
        return [mk("SliceLocal", dst)]
    if isinstance(src, Split) and isinstance(dst, Split):
        return [mk("AllToAll", dst)]
    if isinstance(src, Partial) and isinstance(dst, Split):
        # ReduceScatter modeled as AllReduce followed by a local slice.
        return [mk("AllReduce", B), mk("SliceLocal", dst)]
    raise DistributionError(f"no lowering for {src} -> {dst}")


def boxing_lowering(src: DistributedType, dst: DistributedType) -> list[BoxStep]:
    """Per-mesh-dim collective sequence converting `src` shards into `dst` shards."""
    if src.logical != dst.logical or src.placement != dst.placement:
        raise DistributionError(f"boxing between different logical types: {src} vs {dst}")
    entries = list(src.ndsbp.entries)
    steps: list[BoxStep] = []
    for dim, target in enumerate(dst.ndsbp.entries):
        for step in _dim_steps(src.logical, entries, src.placement, dim, target):
            steps.append(step)
            entries[dim] = step.result_entry
    return steps


def host_shard_steps(dst: DistributedType) -> list[BoxStep]:
    devices = dst.placement.device_count
    payload = dst.logical.byte_size
    return [BoxStep(-1, "Scatter", payload, wire_bytes("Scatter", payload, devices), devices, None)]


def host_unshard_steps(src: DistributedType) -> list[BoxStep]:
    steps: list[BoxStep] = []
    entries = list(src.ndsbp.entries)
    for dim, entry in enumerate(entries):
        if isinstance(entry, (Split, Partial)):
            for step in _dim_steps(src.logical, entries, src.placement, dim, B):
                steps.append(step)
                entries[dim] = step.result_entry
    return steps


def boxing_steps(src: object, target: object) -> list[BoxStep]:
    """Lowered collective sequence for a Boxing node (handles host endpoints)."""
    if target == "host":
        if isinstance(src, DistributedType):
            return host_unshard_steps(src)
        return []
    if isinstance(src, DistributedType):
        return boxing_lowering(src, target)
    return host_shard_steps(target)


def boxing_cost(src: object, target: object, hw: HardwareSpec) -> float:
    return sum(
        comm_cost(s.kind, s.payload_bytes, s.participants, hw) for s in boxing_steps(src, target)
    )


# ---------------------------------------------------------------------------
# Distributed e-graph construction (input / compute / output phases)


def dist_type_of(placement: Placement):
    """Type analysis for distributed e-graphs: host TensorTypes and DistributedTypes."""

    def type_of(op: ir.Op, child_types: Sequence[object]) -> object:
        if isinstance(op, (ir.Input, ir.Constant)):
            return op.type
        if isinstance(op, ir.Boxing):
            if op.target == "host":
                src = child_types[0]
                return src.logical if isinstance(src, DistributedType) else src
            return op.target
        logical_in = [
            t.logical if isinstance(t, DistributedType) else t for t in child_types
        ]
        out_logical = ir.infer_type(op, logical_in)
        nd_in = [t.ndsbp for t in child_types if isinstance(t, DistributedType)]
        if len(nd_in) != len(child_types):
            raise DistributionError(f"compute node {op!r} with host operand")
        out_nd = signature_output(op, nd_in, logical_in)
        if out_nd is None:
            raise DistributionError(f"invalid SBP combination for {op!r}: {nd_in}")
        return DistributedType(out_logical, placement, out_nd)

    return type_of


@dataclass
class DistSpace:
    egraph: EGraph
    ecluster: dict[int, dict[NdSbp, EClassId]]  # logical node id -> sbp -> class
    roots: list[EClassId]
    placement: Placement


def _reshard_targets(nd: NdSbp, ty: TensorType, placement: Placement) -> list[NdSbp]:
    """Single-collective reshards: change exactly one mesh dim of the state.

    Targets that coincide with natively produced states are still returned;
    the construction unions those Boxing nodes into the existing classes,
    keeping the space fully connected.
    """
    out = []
    for d in range(len(nd.entries)):
        if placement.dims[d] == 1:
            continue
        options: list[Sbp] = [B] + [Split(a) for a in range(ty.rank)]
        for opt in options:
            if opt == nd.entries[d]:
                continue
            cand = NdSbp(nd.entries[:d] + (opt,) + nd.entries[d + 1 :])
            try:
                DistributedType(ty, placement, cand)
            except ValueError:
                continue
            out.append(cand)
    return out


def build_dist_egraph(g: Graph, placement: Placement, hw: HardwareSpec) -> DistSpace:
    """Three-phase construction: shard inputs, expand compute over candidate
    SBP combinations (reusing and resharding upstream states, unioning
    same-SBP results), then unshard every output back to the host."""
    from .ir import validate_graph

    problems = validate_graph(g)
    if problems:
        raise DistributionError(f"input graph invalid: {problems}")

    eg = EGraph(type_of=dist_type_of(placement))
    memo: dict[int, dict[NdSbp, EClassId]] = {}
    idx = {n.id: n for n in g.nodes}

    for nid in topo_order(g):
        node = idx[nid]
        if isinstance(node.op, (ir.Input, ir.Constant)):
            host_cid = eg.add_term(node.op)
            memo[nid] = {}
            for nd in sorted(input_sbps(node.type, placement), key=repr):
                dt = DistributedType(node.type, placement, nd)
                memo[nid][nd] = eg.add_term(ir.Boxing(dt), [host_cid])
            continue

        # Compute phase: candidates = upstream states plus single-step reshards.
        in_grps: list[list[tuple[NdSbp, EClassId]]] = []
        for inp in node.inputs:
            cands = dict(memo[inp])
            src_ty = idx[inp].type
            for src_nd, cid in sorted(memo[inp].items(), key=lambda kv: repr(kv[0])):
                for dst_nd in _reshard_targets(src_nd, src_ty, placement):
                    dst_dt = DistributedType(src_ty, placement, dst_nd)
                    rcid = eg.add_term(ir.Boxing(dst_dt), [cid])
                    if dst_nd in cands:
                        eg.union(cands[dst_nd], rcid)
                    else:
                        cands[dst_nd] = rcid
            in_grps.append(sorted(cands.items(), key=lambda kv: repr(kv[0])))

        logical_in = [idx[i].type for i in node.inputs]
        groups: dict[NdSbp, list[EClassId]] = {}
        for combo in itertools.product(*in_grps):
            nd_in = [nd for nd, _ in combo]
            out_nd = signature_output(node.op, nd_in, logical_in)
            if out_nd is None:
                continue
            try:
                DistributedType(node.type, placement, out_nd)
            except ValueError:
                continue
            cid = eg.add_term(node.op, [c for _, c in combo])
            groups.setdefault(out_nd, []).append(cid)
        if not groups:
            raise NoStrategy(f"node {nid} ({node.op!r}) admits no valid signature")
        memo[nid] = {}
        for out_nd, ids in sorted(groups.items(), key=lambda kv: repr(kv[0])):
            acc = ids[0]
            for other in ids[1:]:
                acc = eg.union(acc, other)
            memo[nid][out_nd] = eg.find(acc)
        eg.rebuild()

    roots = []
    for out in g.outputs:
        box_ids = [
            eg.add_term(ir.Boxing("host"), [cid])
            for _, cid in sorted(memo[out].items(), key=lambda kv: repr(kv[0]))
        ]
        acc = box_ids[0]
        for other in box_ids[1:]:
            acc = eg.union(acc, other)
        eg.rebuild()
        roots.append(eg.find(acc))

    return DistSpace(eg, memo, roots, placement)


# ---------------------------------------------------------------------------
# Costs and memory feasibility


def dist_cost_fn(eg: EGraph, hw: HardwareSpec):
    """Per-device compute cost (roofline on shard types) plus boxing comm cost."""

    def shard_tensor_type(t: object) -> TensorType:
        if isinstance(t, DistributedType):
            return TensorType(t.logical.dtype, t.shard_shape(), t.logical.lanes)
        return t

    def fn(cid: EClassId, n: ENode) -> float:
        if isinstance(n.op, (ir.Input, ir.Constant)):
            return 0.0
        if isinstance(n.op, ir.Boxing):
            src = eg.type_of(n.children[0])
            return boxing_cost(src, n.op.target, hw)
        in_types = [shard_tensor_type(eg.type_of(c)) for c in n.children]
        out_type = shard_tensor_type(eg.type_of(cid))
        return roofline_cost(n.op, in_types, out_type, hw)

    return fn


def memory_check(dg: Graph, placement: Placement, hw: HardwareSpec) -> dict:
    """Per-device liveness peak of shard buffers vs the outermost capacity.

    Host-resident values (inputs, constants, host-boxed outputs) are excluded.
    Returns per-device peaks, the cluster sum, and the pass flag (per-device
    constraint; the cluster-sum reading is reported alongside).
    """
    order = topo_order(dg)
    idx = {n.id: n for n in dg.nodes}
    pos = {nid: i for i, nid in enumerate(order)}
    last_use: dict[int, int] = {}
    for nid in order:
        for i in idx[nid].inputs:
            last_use[i] = max(last_use.get(i, pos[i]), pos[nid])
    for nid in order:
        last_use.setdefault(nid, len(order))
        if nid in dg.outputs:
            last_use[nid] = len(order)

    events: list[tuple[int, int, int]] = []  # (def, last_use, bytes per device)
    for nid in order:
        n = idx[nid]
        if n.dist is None:
            continue
        events.append((pos[nid], last_use[nid], n.dist.shard_bytes()))

    peak = 0
    for t in range(len(order) + 1):
        live = sum(b for d, u, b in events if d <= t <= u)
        peak = max(peak, live)

    capacity = hw.levels[-1].capacity
    per_device = [peak] * placement.device_count
    return {
        "per_device_peak": per_device,
        "cluster_sum_peak": peak * placement.device_count,
        "capacity_per_device": capacity,
        "ok": peak <= capacity,
    }


def _selection_peak(eg: EGraph, sel: dict, roots) -> int:
    """Per-device liveness peak of a complete selection, without materializing
    a Graph (the hot path of memory-constrained extraction)."""
    order: list[EClassId] = []
    mark: dict[EClassId, int] = {}

    def visit(cid: EClassId) -> None:
        cid = eg.find(cid)
        if mark.get(cid):
            return
        mark[cid] = 1
        for ch in sel[cid].children:
            visit(ch)
        order.append(cid)

    for r in sorted({eg.find(r) for r in roots}):
        visit(r)
    pos = {cid: i for i, cid in enumerate(order)}
    end = len(order)
    last = {}
    shard = {}
    for cid in order:
        ty = eg.type_of(cid)
        shard[cid] = ty.shard_bytes() if isinstance(ty, DistributedType) else 0
        last[cid] = pos[cid]
    for cid in order:
        for ch in sel[cid].children:
            k = eg.find(ch)
            last[k] = max(last[k], pos[cid])
    for r in roots:
        last[eg.find(r)] = end
    peak = 0
    for t in range(end + 1):
        live = sum(b for cid, b in shard.items() if pos[cid] <= t <= last[cid])
        peak = max(peak, live)
    return peak


def extract_strategy(space: DistSpace, hw: HardwareSpec,
                     memory_limit: Optional[int] = None) -> ExtractionResult:
    """Cost-minimal distributed strategy; optional per-device memory feasibility.

    The constraint is enforced exactly on complete selections via the liveness
    peak, and pruned early with a sound local bound: a node's output shard and
    its input shards coexist while it executes.
    """
    eg = space.egraph
    cost_fn = dist_cost_fn(eg, hw)
    feasibility = None
    step_feasible = None
    if memory_limit is not None:

        def feasibility(sel):
            return _selection_peak(eg, sel, space.roots) <= memory_limit

        def step_feasible(cid, node):
            ty = eg.type_of(cid)
            total = ty.shard_bytes() if isinstance(ty, DistributedType) else 0
            for ch in {eg.find(c) for c in node.children}:
                cty = eg.type_of(ch)
                if isinstance(cty, DistributedType):
                    total += cty.shard_bytes()
            return total <= memory_limit

    problem = ExtractionProblem(
        eg, space.roots, cost_fn, feasibility, step_feasible, memory_limit
    )
    return extract(problem)
