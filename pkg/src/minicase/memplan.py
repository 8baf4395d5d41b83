"""Bufferization: alias analysis, liveness intervals, and offset assignment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import ir
from .ir import Graph, topo_order
from .sbp import Broadcast, DistributedType, Partial, Placement, Split


class PlanError(Exception):
    pass


@dataclass
class BufferRecord:
    id: int  # graph node id
    size: int  # bytes (0 for aliases)
    first_def: int
    last_use: int
    alias_of: Optional[int] = None
    alias_offset: int = 0  # byte offset into the alias root's storage
    pinned: bool = False


@dataclass
class MemoryPlan:
    offsets: dict[int, int]
    footprint: int
    alignment: int


def _row_major_strides(shape: Sequence[int]) -> list[int]:
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return strides


def _slice_alias(op: ir.Slice, in_shape: Sequence[int]) -> Optional[int]:
    """Element offset when the sliced region is contiguous in row-major order.

    Contiguous iff every axis before the first partial axis is sliced to
    extent 1 and every axis after it is taken in full.
    """
    extents = [e - b for b, e in zip(op.begins, op.ends)]
    partial = [i for i, (ext, d) in enumerate(zip(extents, in_shape)) if ext != d]
    if partial:
        k = partial[0]
        if any(extents[i] != 1 for i in range(k)):
            return None
        if any(extents[i] != in_shape[i] for i in range(k + 1, len(in_shape))):
            return None
    strides = _row_major_strides(in_shape)
    return sum(b * s for b, s in zip(op.begins, strides))


def alias_analysis(g: Graph) -> dict[int, tuple[int, int]]:
    """node id -> (aliased input id, byte offset) for view-semantics operators."""
    out: dict[int, tuple[int, int]] = {}
    idx = {n.id: n for n in g.nodes}
    for n in g.nodes:
        if isinstance(n.op, ir.Reshape):
            out[n.id] = (n.inputs[0], 0)
        elif isinstance(n.op, ir.Slice):
            src = idx[n.inputs[0]]
            elem_off = _slice_alias(n.op, src.type.shape)
            if elem_off is not None:
                out[n.id] = (n.inputs[0], elem_off * src.type.dtype.byte_width)
    return out


def liveness(g: Graph) -> list[BufferRecord]:
    """Interval per buffer over the fixed topological order; aliases extend roots."""
    order = topo_order(g)
    pos = {nid: i for i, nid in enumerate(order)}
    idx = {n.id: n for n in g.nodes}
    aliases = alias_analysis(g)

    def root_of(nid: int) -> tuple[int, int]:
        off = 0
        while nid in aliases:
            src, o = aliases[nid]
            off += o
            nid = src
        return nid, off

    records: dict[int, BufferRecord] = {}
    for nid in order:
        n = idx[nid]
        root, _ = root_of(nid)
        if root == nid:
            records[nid] = BufferRecord(
                id=nid,
                size=n.type.byte_size,
                first_def=pos[nid],
                last_use=pos[nid],
                pinned=isinstance(n.op, ir.Constant),
            )
    for nid in order:
        n = idx[nid]
        for i in n.inputs:
            root, _ = root_of(i)
            records[root].last_use = max(records[root].last_use, pos[nid])
        root, _ = root_of(nid)
        records[root].last_use = max(records[root].last_use, pos[nid])
    for out_id in g.outputs:
        root, _ = root_of(out_id)
        records[root].last_use = len(order)

    result = list(records.values())
    for nid in order:
        if nid in aliases:
            root, off = root_of(nid)
            result.append(
                BufferRecord(
                    id=nid,
                    size=0,
                    first_def=records[root].first_def,
                    last_use=records[root].last_use,
                    alias_of=root,
                    alias_offset=off,
                )
            )
    return sorted(result, key=lambda r: r.id)


def _interferes(a: BufferRecord, b: BufferRecord) -> bool:
    return a.first_def <= b.last_use and b.first_def <= a.last_use


def _align(x: int, alignment: int) -> int:
    return (x + alignment - 1) // alignment * alignment


def clique_lower_bound(buffers: Sequence[BufferRecord], alignment: int = 64) -> int:
    """Max over time of the sum of live (aligned) sizes."""
    times = sorted({b.first_def for b in buffers} | {b.last_use for b in buffers})
    best = 0
    for t in times:
        live = sum(
            _align(b.size, alignment)
            for b in buffers
            if b.alias_of is None and b.first_def <= t <= b.last_use
        )
        best = max(best, live)
    return best


def plan(buffers: Sequence[BufferRecord], mode: str = "exact", alignment: int = 64,
         exact_threshold: int = 12) -> MemoryPlan:
    """Assign byte offsets so interfering buffers never overlap.

    exact mode: branch-and-bound over candidate offsets, minimal footprint.
    firstfit: first-fit decreasing, valid but possibly larger.
    """
    real = [b for b in buffers if b.alias_of is None and not b.pinned]
    sizes = {b.id: _align(b.size, alignment) for b in real}

    if mode == "exact" and len(real) > exact_threshold:
        mode = "firstfit"

    if mode == "firstfit":
        offsets = _first_fit(real, sizes)
    elif mode == "exact":
        offsets = _exact_pack(real, sizes, alignment)
    else:
        raise PlanError(f"unknown mode {mode!r}")

    footprint = max((offsets[b.id] + sizes[b.id] for b in real), default=0)
    for b in buffers:
        if b.alias_of is not None:
            offsets[b.id] = offsets[b.alias_of] + b.alias_offset
    return MemoryPlan(offsets, footprint, alignment)


def _first_fit(real: Sequence[BufferRecord], sizes: dict[int, int]) -> dict[int, int]:
    offsets: dict[int, int] = {}
    order = sorted(real, key=lambda b: (-sizes[b.id], b.first_def, b.id))
    for b in order:
        neighbors = [o for o in real if o.id in offsets and _interferes(b, o)]
        candidates = sorted({0} | {offsets[o.id] + sizes[o.id] for o in neighbors})
        for cand in candidates:
            if all(
                cand + sizes[b.id] <= offsets[o.id] or offsets[o.id] + sizes[o.id] <= cand
                for o in neighbors
            ):
                offsets[b.id] = cand
                break
    return offsets


def _lowest_fit(b: BufferRecord, size: int, placed: Sequence[BufferRecord],
                offsets: dict[int, int], sizes: dict[int, int]) -> int:
    neighbors = [o for o in placed if _interferes(b, o)]
    for cand in sorted({0} | {offsets[o.id] + sizes[o.id] for o in neighbors}):
        if all(
            cand + size <= offsets[o.id] or offsets[o.id] + sizes[o.id] <= cand
            for o in neighbors
        ):
            return cand
    raise PlanError("unreachable: unbounded strip always fits")


def _exact_pack(real: Sequence[BufferRecord], sizes: dict[int, int],
                alignment: int) -> dict[int, int]:
    """Branch over insertion orders, placing each buffer at its lowest feasible
    offset.  Any normalized optimal layout is reproduced by its offset-sorted
    insertion order, so this search is complete."""
    items = sorted(real, key=lambda b: b.id)
    lb = clique_lower_bound(real, alignment)
    best_offsets = _first_fit(real, sizes)
    best = max((best_offsets[b.id] + sizes[b.id] for b in real), default=0)

    def recurse(remaining: list[BufferRecord], placed: list[BufferRecord],
                offsets: dict[int, int], height: int) -> None:
        nonlocal best, best_offsets
        if height >= best or best <= lb:
            return
        if not remaining:
            best = height
            best_offsets = dict(offsets)
            return
        tried: set[tuple] = set()  # interchangeable buffers branch once
        for idx, b in enumerate(remaining):
            sig = (sizes[b.id], b.first_def, b.last_use)
            if sig in tried:
                continue
            tried.add(sig)
            cand = _lowest_fit(b, sizes[b.id], placed, offsets, sizes)
            offsets[b.id] = cand
            placed.append(b)
            recurse(
                remaining[:idx] + remaining[idx + 1 :],
                placed,
                offsets,
                max(height, cand + sizes[b.id]),
            )
            placed.pop()
            del offsets[b.id]

    recurse(items, [], {}, 0)
    return best_offsets


def plan_constants(dg: Graph, placement: Placement) -> dict[int, dict[int, tuple[int, int]]]:
    """Per-device pinned layout for constants: device -> node id -> (offset, bytes).

    Shards follow each constant's NdSbp; Broadcast pins the full tensor on
    every device.  Partial constants are rejected.
    """
    layouts: dict[int, dict[int, tuple[int, int]]] = {
        d: {} for d in range(placement.device_count)
    }
    cursors = [0] * placement.device_count
    for n in dg.nodes:
        if not isinstance(n.op, ir.Constant):
            continue
        dist = n.dist
        if dist is None:
            continue
        if any(isinstance(e, Partial) for e in dist.ndsbp.entries):
            raise PlanError(f"constant {n.id} has a Partial state")
        nbytes = dist.shard_bytes()
        for d in range(placement.device_count):
            layouts[d][n.id] = (cursors[d], nbytes)
            cursors[d] += _align(nbytes, 64)
    return layouts


def plan_report(buffers: Sequence[BufferRecord], mp: MemoryPlan) -> str:
    lines = ["buffer  size  interval  alias  offset"]
    for b in buffers:
        alias = f"t{b.alias_of}" if b.alias_of is not None else "-"
        off = mp.offsets.get(b.id, -1)
        lines.append(
            f"t{b.id}  {b.size}B  [{b.first_def},{b.last_use}]  {alias}  {off}"
        )
    lines.append(f"footprint = {mp.footprint} bytes (alignment {mp.alignment})")
    return "\n".join(lines)


def plan_to_json(buffers: Sequence[BufferRecord], mp: MemoryPlan) -> dict:
    return {
        "buffers": [
            {
                "id": b.id,
                "size": b.size,
                "first_def": b.first_def,
                "last_use": b.last_use,
                "alias_of": b.alias_of,
                "alias_offset": b.alias_offset,
                "pinned": b.pinned,
                "offset": mp.offsets.get(b.id),
            }
            for b in buffers
        ],
        "footprint": mp.footprint,
        "alignment": mp.alignment,
    }
