"""Dense reference executor for logical graphs and simulated multi-device graphs."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ir
from .ir import Graph, TensorType, topo_order
from .sbp import Broadcast, DistributedType, NdSbp, Partial, Placement, Split


class InterpError(Exception):
    pass


class MissingInput(InterpError):
    pass


class TypeMismatch(InterpError):
    pass


class ShardMismatch(InterpError):
    pass


@dataclass(frozen=True)
class TensorValue:
    type: TensorType
    data: np.ndarray  # row-major float32, shape == type.shape + type.lanes

    def __post_init__(self) -> None:
        if tuple(self.data.shape) != self.type.shape + self.type.lanes:
            raise TypeMismatch(f"payload shape {self.data.shape} != {self.type}")


def _round_dtype(x: np.ndarray, ty: TensorType) -> np.ndarray:
    # F16 values are carried as f32 but rounded through IEEE half (RTNE) at
    # operator boundaries so results are deterministic without native halfs.
    if ty.dtype.kind == "f16":
        return x.astype(np.float16).astype(np.float32)
    return np.asarray(x, dtype=np.float32)


def pack_array(x: np.ndarray, lanes: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    """Split each listed axis into (outer, lane) and move lanes to trailing positions."""
    rank = x.ndim
    new_shape: list[int] = []
    lane_positions: list[int] = []
    for i, d in enumerate(x.shape):
        if i in axes:
            l = lanes[axes.index(i)]
            new_shape.extend([d // l, l])
            lane_positions.append(len(new_shape) - 1)
        else:
            new_shape.append(d)
    y = x.reshape(new_shape)
    outer_positions = [i for i in range(len(new_shape)) if i not in lane_positions]
    return y.transpose(outer_positions + lane_positions)


def unpack_array(x: np.ndarray, lanes: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    """Exact inverse of pack_array."""
    n_lanes = len(lanes)
    outer_rank = x.ndim - n_lanes
    lane_positions = []
    pos = 0
    interleaved: list[int] = []
    for i in range(outer_rank):
        interleaved.append(i)
        if i in axes:
            lane_positions.append(pos + 1)
            interleaved.append(outer_rank + axes.index(i))
            pos += 2
        else:
            pos += 1
    y = x.transpose(interleaved)
    final = []
    for i in range(outer_rank):
        if i in axes:
            final.append(x.shape[i] * lanes[axes.index(i)])
        else:
            final.append(x.shape[i])
    return y.reshape(final)


def _matmul_packed(a: np.ndarray, b: np.ndarray, ta: TensorType, tb: TensorType,
                   out: TensorType) -> np.ndarray:
    # Packed matmul is defined as unpack -> matmul -> pack under the fixed
    # conventions in ir._matmul_type.
    r = len(ta.shape)
    if len(ta.lanes) == 1:
        la = unpack_array(a, ta.lanes, (r - 1,))
        lb = unpack_array(b, tb.lanes, (r - 1,))
        prod = np.matmul(la, lb)
        return pack_array(prod, out.lanes, (r - 1,))
    la = unpack_array(a, ta.lanes, (r - 2, r - 1))
    lb = unpack_array(b, tb.lanes, (r - 2, r - 1))
    prod = np.matmul(la, lb)
    return pack_array(prod, out.lanes, (r - 2, r - 1))


def eval_op(op: ir.Op, args: list[np.ndarray], in_types: list[TensorType],
            out_type: TensorType) -> np.ndarray:
    if isinstance(op, ir.Constant):
        return op.to_array()
    if isinstance(op, ir.Unary):
        x = args[0]
        y = {"exp": np.exp, "neg": np.negative, "abs": np.abs}[op.fn](x)
    elif isinstance(op, ir.Binary):
        a, b = args
        y = {"add": np.add, "mul": np.multiply, "sub": np.subtract}[op.fn](a, b)
    elif isinstance(op, ir.MatMul):
        if in_types[0].lanes or in_types[1].lanes:
            y = _matmul_packed(args[0], args[1], in_types[0], in_types[1], out_type)
        else:
            y = np.matmul(args[0], args[1])
    elif isinstance(op, ir.Transpose):
        y = np.transpose(args[0], op.perm)
    elif isinstance(op, ir.Pack):
        y = pack_array(args[0], op.lanes, op.axes)
    elif isinstance(op, ir.Unpack):
        y = unpack_array(args[0], in_types[0].lanes, op.axes)
    elif isinstance(op, ir.Reshape):
        y = args[0].reshape(op.new_shape)
    elif isinstance(op, ir.Slice):
        y = args[0][tuple(slice(b, e) for b, e in zip(op.begins, op.ends))]
    elif isinstance(op, ir.Boxing):
        y = args[0]
    else:
        raise InterpError(f"cannot evaluate {op!r}")
    return _round_dtype(y, out_type)


def eval(g: Graph, inputs: Mapping[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Execute the graph; returns {output node id: array}."""
    env: dict[int, np.ndarray] = {}
    idx = {n.id: n for n in g.nodes}
    for nid in topo_order(g):
        n = idx[nid]
        if isinstance(n.op, ir.Input):
            if n.op.name not in inputs:
                raise MissingInput(f"input {n.op.name!r} not supplied")
            x = np.asarray(inputs[n.op.name], dtype=np.float32)
            if tuple(x.shape) != n.type.shape + n.type.lanes:
                raise TypeMismatch(f"input {n.op.name!r}: shape {x.shape} != {n.type}")
            env[nid] = _round_dtype(x, n.type)
            continue
        args = [env[i] for i in n.inputs]
        in_types = [idx[i].type for i in n.inputs]
        env[nid] = eval_op(n.op, args, in_types, n.type)
    return {o: env[o] for o in g.outputs}


def eval_single(g: Graph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    outs = eval(g, inputs)
    if len(outs) != 1:
        raise InterpError("graph has multiple outputs")
    return next(iter(outs.values()))


# ---------------------------------------------------------------------------
# Multi-device simulation


@dataclass
class DeviceSim:
    """Per-device stores plus byte counters mirroring the cost model's on-wire accounting."""

    device_count: int
    stores: list[dict[int, np.ndarray]] = field(init=False)
    traffic: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.stores = [{} for _ in range(self.device_count)]

    def count(self, kind: str, wire_bytes: int) -> None:
        self.traffic[kind] = self.traffic.get(kind, 0) + int(wire_bytes)


def _device_groups(placement: Placement, dim: int) -> list[list[int]]:
    """Device ids grouped so that each group varies only along mesh dim `dim`."""
    groups: dict[tuple, list[int]] = {}
    for dev in range(placement.device_count):
        coords = placement.coords(dev)
        key = coords[:dim] + coords[dim + 1 :]
        groups.setdefault(key, []).append(dev)
    return [sorted(v) for v in groups.values()]


def shard_host_value(value: np.ndarray, dt: DistributedType) -> list[np.ndarray]:
    """Per-device shards of a host tensor under `dt` (Partial: device 0 holds all)."""
    placement = dt.placement
    shards = [np.array(value, dtype=np.float32) for _ in range(placement.device_count)]
    for dim, entry in enumerate(dt.ndsbp.entries):
        mesh = placement.dims[dim]
        for dev in range(placement.device_count):
            coord = placement.coords(dev)[dim]
            if isinstance(entry, Split):
                width = shards[dev].shape[entry.axis] // mesh
                sl = [slice(None)] * shards[dev].ndim
                sl[entry.axis] = slice(coord * width, (coord + 1) * width)
                shards[dev] = shards[dev][tuple(sl)]
            elif isinstance(entry, Partial):
                if coord != 0:
                    shards[dev] = np.zeros_like(shards[dev])
    return [s.copy() for s in shards]


def unshard_to_host(shards: list[np.ndarray], dt: DistributedType) -> np.ndarray:
    """Assemble the full logical tensor from per-device shards."""
    placement = dt.placement
    current = list(shards)
    for dim in reversed(range(len(dt.ndsbp.entries))):
        entry = dt.ndsbp.entries[dim]
        mesh = placement.dims[dim]
        groups = _device_groups(placement, dim)
        merged: dict[int, np.ndarray] = {}
        for group in groups:
            vals = [current[d] for d in group]
            if isinstance(entry, Split):
                out = np.concatenate(vals, axis=entry.axis)
            elif isinstance(entry, Partial):
                out = np.sum(vals, axis=0)
            else:
                out = vals[0]
            for d in group:
                merged[d] = out
        current = [merged[d] for d in range(placement.device_count)]
    return current[0]


def eval_distributed(
    dg: Graph, placement: Placement, inputs: Mapping[str, np.ndarray]
) -> tuple[dict[int, np.ndarray], dict[str, int]]:
    """Simulate per-device execution of a distributed graph.

    Boxing nodes are lowered on the fly (see distribution.boxing_lowering); all
    other nodes compute locally on their shards.  Returns host outputs plus
    wire-byte counters per collective kind.
    """
    from .distribution import boxing_lowering

    sim = DeviceSim(placement.device_count)
    idx = {n.id: n for n in dg.nodes}
    host: dict[int, np.ndarray] = {}

    for nid in topo_order(dg):
        n = idx[nid]
        if isinstance(n.op, ir.Input):
            if n.op.name not in inputs:
                raise MissingInput(f"input {n.op.name!r} not supplied")
            host[nid] = _round_dtype(np.asarray(inputs[n.op.name], dtype=np.float32), n.type)
            continue
        if isinstance(n.op, ir.Constant) and n.dist is None:
            host[nid] = n.op.to_array()
            continue

        if isinstance(n.op, ir.Boxing):
            from .distribution import boxing_steps

            src_node = idx[n.inputs[0]]
            if n.op.target == "host":
                if src_node.dist is None:
                    host[nid] = host[n.inputs[0]]
                    continue
                sdt: DistributedType = src_node.dist
                shards = [sim.stores[d][src_node.id] for d in range(placement.device_count)]
                for step in boxing_steps(sdt, "host"):
                    if step.wire_bytes > 0:
                        sim.count(step.kind, step.wire_bytes)
                host[nid] = unshard_to_host(shards, sdt)
                continue
            dt: DistributedType = n.op.target
            if src_node.dist is None:
                # Host -> device shard boxing.
                value = host[n.inputs[0]]
                shards = shard_host_value(value, dt)
                for d in range(placement.device_count):
                    sim.stores[d][nid] = shards[d]
                for step in boxing_steps(src_node.type, dt):
                    if step.wire_bytes > 0:
                        sim.count(step.kind, step.wire_bytes)
                continue
            _reshard(sim, idx, n, src_node.dist, dt, placement)
            continue

        if n.dist is None:
            # Logical node in a partially-annotated graph: host compute.
            args = [host[i] for i in n.inputs]
            in_types = [idx[i].type for i in n.inputs]
            host[nid] = eval_op(n.op, args, in_types, n.type)
            continue

        # Local compute on every device.
        in_types = [_shard_type(idx[i]) for i in n.inputs]
        out_sh = _shard_type(n)
        try:
            inferred = ir.infer_type(n.op, in_types)
        except ir.IrError as e:
            raise ShardMismatch(f"node {nid}: shard types do not compose: {e}")
        if inferred != out_sh:
            raise ShardMismatch(
                f"node {nid}: declared shard {out_sh} inconsistent with inputs ({inferred})"
            )
        for d in range(placement.device_count):
            args = []
            for i in n.inputs:
                if i not in sim.stores[d]:
                    raise ShardMismatch(f"device {d} missing shard for node {i}")
                args.append(sim.stores[d][i])
            sim.stores[d][nid] = eval_op(n.op, args, in_types, out_sh)

    outs = {}
    for o in dg.outputs:
        if o in host:
            outs[o] = host[o]
        else:
            raise InterpError(f"output {o} not materialized on host")
    return outs, dict(sim.traffic)


def _shard_type(node: ir.GraphNode) -> TensorType:
    if node.dist is None:
        return node.type
    return TensorType(node.type.dtype, node.dist.shard_shape(), node.type.lanes)


def _reshard(sim: DeviceSim, idx, node: ir.GraphNode, src: DistributedType,
             dst: DistributedType, placement: Placement) -> None:
    """Simulate per-dim collectives converting `src` shards into `dst` shards."""
    from .distribution import boxing_lowering

    shards = [sim.stores[d][node.inputs[0]] for d in range(placement.device_count)]
    cur_entries = list(src.ndsbp.entries)

    for step in boxing_lowering(src, dst):
        dim, kind = step.dim, step.kind
        mesh = placement.dims[dim]
        groups = _device_groups(placement, dim)
        src_e = cur_entries[dim]
        dst_e = step.result_entry
        for group in groups:
            vals = [shards[d] for d in group]
            if kind == "AllReduce":
                total = np.sum(vals, axis=0)
                new = {d: total for d in group}
            elif kind == "AllGather":
                assert isinstance(src_e, Split)
                full = np.concatenate(vals, axis=src_e.axis)
                new = {d: full for d in group}
            elif kind == "SliceLocal":
                assert isinstance(dst_e, Split)
                new = {}
                for pos, d in enumerate(group):
                    width = vals[pos].shape[dst_e.axis] // mesh
                    sl = [slice(None)] * vals[pos].ndim
                    sl[dst_e.axis] = slice(pos * width, (pos + 1) * width)
                    new[d] = vals[pos][tuple(sl)]
            elif kind == "AllToAll":
                assert isinstance(src_e, Split) and isinstance(dst_e, Split)
                full = np.concatenate(vals, axis=src_e.axis)
                new = {}
                for pos, d in enumerate(group):
                    width = full.shape[dst_e.axis] // mesh
                    sl = [slice(None)] * full.ndim
                    sl[dst_e.axis] = slice(pos * width, (pos + 1) * width)
                    new[d] = full[tuple(sl)]
            else:
                raise InterpError(f"unknown collective {kind}")
            for d in group:
                shards[d] = np.ascontiguousarray(new[d])
        if step.wire_bytes > 0:
            sim.count(kind, step.wire_bytes)
        cur_entries[dim] = dst_e

    for d in range(placement.device_count):
        sim.stores[d][node.id] = shards[d]


# ---------------------------------------------------------------------------
# Tiled schedule execution


class CapacityViolation(InterpError):
    pass


def eval_scheduled(ttg, sol, inputs: Mapping[str, np.ndarray], hw,
                   constants: Mapping[str, np.ndarray] | None = None):
    """Execute a tiered tile graph under a concrete tile/placement solution.

    Values come from walking the actual loop nest; level-1 tiles run as block
    operations, and reduction tiles accumulate in loop order.  Traffic follows
    the placement-based accounting: a copy stored at sl refilled from the next
    outer copy moves its bytes through every level in [sl, outer]; copies with
    a write role are charged 2v-1 times (refill plus write-back, first visit
    write-only).  Returns (outputs by buffer name, per-level byte counters).
    """
    constants = constants or {}
    tiles = sol.tiles
    top = ttg.num_levels - 1

    def tv(node, dim: str) -> int:
        return tiles.get((node.owner, node.level, dim), 1)

    def carries(node, dim: str) -> bool:
        return dim in node.loops or any(carries(c, dim) for c in node.children)

    def below(node, dim: str) -> int:
        for ch in node.children:
            if carries(ch, dim):
                inner = below(ch, dim)
                return tv(ch, dim) * inner if dim in ch.loops else inner
        return 1

    # Capacity pre-check mirroring the model's per-level occupancy rule.
    root_of_op: dict[int, int] = {}
    for root in ttg.roots:
        for op_id in ttg.subtree_ops(root):
            root_of_op[op_id] = root.owner
    usage: dict[tuple[int, object], int] = {}
    for p in sol.placements:
        owner = p.op_id if p.op_id is not None else p.position.node[0]
        group: object = "top" if p.sl == top else root_of_op.get(owner, owner)
        usage[(p.sl, group)] = usage.get((p.sl, group), 0) + p.size_bytes
    for (lvl, _), used in usage.items():
        if used > hw.levels[lvl].capacity:
            raise CapacityViolation(f"level {lvl} holds {used} bytes over capacity")

    # Materialize full logical arrays per buffer.
    arrays: dict[str, np.ndarray] = {}
    for buf in ttg.buffers:
        shape = tuple(ttg.extent(d) for d in buf.dims)
        if buf.source is not None:
            if buf.source not in inputs:
                raise MissingInput(f"input {buf.source!r} not supplied")
            x = np.asarray(inputs[buf.source], dtype=np.float32)
            if tuple(x.shape) != shape:
                raise TypeMismatch(f"input {buf.source!r}: shape {x.shape} != {shape}")
            arrays[buf.name] = x.copy()
        elif buf.name in constants:
            arrays[buf.name] = np.asarray(constants[buf.name], dtype=np.float32).reshape(shape)
        else:
            arrays[buf.name] = np.zeros(shape, dtype=np.float32)

    node_entries: dict[tuple[int, int], int] = {}

    def run_op(op_id: int, offsets: dict[str, int], l1_node) -> None:
        op = ttg.op_info(op_id)
        ext = {d: tv(l1_node, d) for d in op.dims if d in l1_node.loops}

        def slice_of(buf_name: str):
            buf = ttg.buffer(buf_name)
            return tuple(
                slice(offsets.get(d, 0), offsets.get(d, 0) + ext.get(d, 1)) for d in buf.dims
            )

        out_buf = op.writes[0]
        out_dims = set(ttg.buffer(out_buf).dims)
        reduction = [d for d in op.dims if d not in out_dims]
        fresh = all(offsets.get(d, 0) == 0 for d in reduction)

        if op.kind == "matmul":
            a = arrays[op.reads[0]][slice_of(op.reads[0])]
            b = arrays[op.reads[1]][slice_of(op.reads[1])]
            contrib = a @ b
            if fresh:
                arrays[out_buf][slice_of(out_buf)] = contrib
            else:
                arrays[out_buf][slice_of(out_buf)] += contrib
        elif op.kind == "unary":
            x = arrays[op.reads[0]][slice_of(op.reads[0])]
            fn = {"exp": np.exp, "neg": np.negative, "abs": np.abs}[op.fn]
            arrays[out_buf][slice_of(out_buf)] = fn(x)
        elif op.kind == "binary":
            a = arrays[op.reads[0]][slice_of(op.reads[0])]
            b = arrays[op.reads[1]][slice_of(op.reads[1])]
            fn = {"add": np.add, "mul": np.multiply, "sub": np.subtract}[op.fn]
            arrays[out_buf][slice_of(out_buf)] = fn(a, b)
        else:
            raise InterpError(f"unschedulable op kind {op.kind}")

    def walk(node, offsets: dict[str, int]) -> None:
        key = (node.owner, node.level)
        node_entries[key] = node_entries.get(key, 0) + 1
        if node.level == 0:
            return
        if node.level == 1:
            for ch in node.children:
                node_entries[(ch.owner, 0)] = node_entries.get((ch.owner, 0), 0) + 1
                run_op(ch.owner, offsets, node)
            return
        strides = {d: below(node, d) for d in node.loops}
        ranges = [range(tv(node, d)) for d in node.loops]
        for idx in itertools.product(*ranges):
            child_offsets = dict(offsets)
            for d, i in zip(node.loops, idx):
                child_offsets[d] = offsets.get(d, 0) + i * strides[d]
            for ch in node.children:
                walk(ch, child_offsets)

    for root in ttg.roots:
        walk(root, {})

    # Placement-based traffic derived from the walked entry counts.
    counters = [0] * ttg.num_levels
    by_access: dict[tuple, list] = {}
    for p in sol.placements:
        by_access.setdefault((p.op_id, p.buffer), []).append(p)
    node_index = {(n.owner, n.level): n for n in ttg.walk()}
    for (op_id, buf_name), recs in by_access.items():
        ordered = sorted((r for r in recs if r.role != "home"), key=lambda r: -r.sl)
        has_home = any(r.role == "home" for r in recs)
        outer_sl = top if has_home else None
        for r in ordered:
            node = node_index[r.position.node]
            inner = 1
            for i, loop in enumerate(node.loops):
                if i < r.position.entry:
                    inner *= tv(node, loop)
            v = node_entries.get(r.position.node, 0) * inner
            mult = 2 * v - 1 if r.role in ("write", "fused") and v > 0 else v
            hi = outer_sl if outer_sl is not None else r.sl
            for l in range(r.sl, hi + 1):
                counters[l] += r.size_bytes * mult
            outer_sl = r.sl

    write_bufs = {b for op in ttg.ops for b in op.writes}
    outputs = {
        buf.name: arrays[buf.name]
        for buf in ttg.buffers
        if buf.is_io and buf.name in write_bufs
    }
    return outputs, counters
