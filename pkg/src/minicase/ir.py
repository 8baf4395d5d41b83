"""Logical dense-tensor IR: types, operator vocabulary, graphs, and shape inference."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class IrError(Exception):
    pass


class ArityMismatch(IrError):
    pass


class ShapeMismatch(IrError):
    pass


class IndivisiblePack(IrError):
    pass


@dataclass(frozen=True)
class DataType:
    kind: str  # "f32" | "f16"

    @property
    def byte_width(self) -> int:
        return 4 if self.kind == "f32" else 2

    def __post_init__(self) -> None:
        if self.kind not in ("f32", "f16"):
            raise IrError(f"unknown dtype {self.kind!r}")


F32 = DataType("f32")
F16 = DataType("f16")


@dataclass(frozen=True)
class TensorType:
    """Dense tensor type; `lanes` are trailing packed dims (empty when unpacked)."""

    dtype: DataType
    shape: tuple[int, ...]
    lanes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any(d < 1 for d in self.shape) or any(l < 1 for l in self.lanes):
            raise IrError(f"non-positive dim in {self.shape} / {self.lanes}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def elem_count(self) -> int:
        return math.prod(self.shape) * math.prod(self.lanes)

    @property
    def byte_size(self) -> int:
        return self.elem_count * self.dtype.byte_width

    def __repr__(self) -> str:
        lanes = "".join(f"<{','.join(map(str, self.lanes))}>") if self.lanes else ""
        return f"{self.dtype.kind}[{','.join(map(str, self.shape))}]{lanes}"


def tensor(shape: Sequence[int], dtype: DataType = F32, lanes: Sequence[int] = ()) -> TensorType:
    return TensorType(dtype, tuple(shape), tuple(lanes))


# ---------------------------------------------------------------------------
# Operator vocabulary.  Ops are immutable and hashable so e-graph hashconsing
# can key on them directly; constant payloads are raw row-major bytes.


class Op:
    pass


@dataclass(frozen=True)
class Input(Op):
    name: str
    type: TensorType


@dataclass(frozen=True)
class Constant(Op):
    type: TensorType
    data: bytes

    def to_array(self) -> np.ndarray:
        np_dtype = np.float32 if self.type.dtype.kind == "f32" else np.float16
        arr = np.frombuffer(self.data, dtype=np_dtype)
        full = self.type.shape + self.type.lanes
        return arr.reshape(full).astype(np.float32)


def constant(values: np.ndarray, dtype: DataType = F32, lanes: Sequence[int] = ()) -> Constant:
    arr = np.asarray(values, dtype=np.float32 if dtype.kind == "f32" else np.float16)
    shape = arr.shape[: arr.ndim - len(lanes)] if lanes else arr.shape
    ty = TensorType(dtype, tuple(shape), tuple(lanes))
    return Constant(ty, arr.tobytes())


UNARY_KINDS = ("exp", "neg", "abs")
BINARY_KINDS = ("add", "mul", "sub")


@dataclass(frozen=True)
class Unary(Op):
    fn: str

    def __post_init__(self) -> None:
        if self.fn not in UNARY_KINDS:
            raise IrError(f"unknown unary {self.fn!r}")


@dataclass(frozen=True)
class Binary(Op):
    fn: str

    def __post_init__(self) -> None:
        if self.fn not in BINARY_KINDS:
            raise IrError(f"unknown binary {self.fn!r}")


@dataclass(frozen=True)
class MatMul(Op):
    pass


@dataclass(frozen=True)
class Transpose(Op):
    perm: tuple[int, ...]

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(len(self.perm))):
            raise IrError(f"perm {self.perm} is not a permutation")


@dataclass(frozen=True)
class Pack(Op):
    lanes: tuple[int, ...]
    axes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.lanes) != len(self.axes):
            raise IrError("pack lanes/axes length mismatch")
        if list(self.axes) != sorted(set(self.axes)):
            raise IrError(f"pack axes {self.axes} not strictly increasing")


@dataclass(frozen=True)
class Unpack(Op):
    axes: tuple[int, ...]

    def __post_init__(self) -> None:
        if list(self.axes) != sorted(set(self.axes)):
            raise IrError(f"unpack axes {self.axes} not strictly increasing")


@dataclass(frozen=True)
class Reshape(Op):
    new_shape: tuple[int, ...]


@dataclass(frozen=True)
class Slice(Op):
    begins: tuple[int, ...]
    ends: tuple[int, ...]


@dataclass(frozen=True)
class Boxing(Op):
    """Unified communication primitive; `target` is a distributed type (or "host")."""

    target: object


def perm_inverse(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def perm_compose(perm1: Sequence[int], perm2: Sequence[int]) -> tuple[int, ...]:
    """Permutation of transpose-after-transpose: T_p2(T_p1(x)) == T_result(x)."""
    return tuple(perm1[p] for p in perm2)


def infer_type(kind: Op, input_types: Sequence[TensorType]) -> TensorType:
    """Output type of `kind` applied to `input_types`; raises on invalid combinations."""

    def need(n: int) -> None:
        if len(input_types) != n:
            raise ArityMismatch(f"{kind} expects {n} inputs, got {len(input_types)}")

    if isinstance(kind, (Input, Constant)):
        need(0)
        return kind.type

    if isinstance(kind, Unary):
        need(1)
        return input_types[0]

    if isinstance(kind, Binary):
        need(2)
        a, b = input_types
        if a != b:
            raise ShapeMismatch(f"binary operands differ: {a} vs {b}")
        return a

    if isinstance(kind, MatMul):
        need(2)
        return _matmul_type(input_types[0], input_types[1])

    if isinstance(kind, Transpose):
        need(1)
        t = input_types[0]
        if t.lanes:
            raise ShapeMismatch("transpose of packed tensor unsupported")
        if len(kind.perm) != t.rank:
            raise ShapeMismatch(f"perm rank {len(kind.perm)} vs tensor rank {t.rank}")
        return TensorType(t.dtype, tuple(t.shape[p] for p in kind.perm))

    if isinstance(kind, Pack):
        need(1)
        t = input_types[0]
        if t.lanes:
            raise IndivisiblePack("pack of already-packed tensor")
        if any(a >= t.rank for a in kind.axes):
            raise ShapeMismatch(f"pack axes {kind.axes} out of range for rank {t.rank}")
        shape = list(t.shape)
        for a, l in zip(kind.axes, kind.lanes):
            if shape[a] % l != 0:
                raise IndivisiblePack(f"axis {a} of {t} not divisible by lane {l}")
            shape[a] //= l
        return TensorType(t.dtype, tuple(shape), kind.lanes)

    if isinstance(kind, Unpack):
        need(1)
        t = input_types[0]
        if len(kind.axes) != len(t.lanes):
            raise ShapeMismatch(f"unpack axes {kind.axes} vs lanes {t.lanes}")
        if any(a >= t.rank for a in kind.axes):
            raise ShapeMismatch(f"unpack axes {kind.axes} out of range for rank {t.rank}")
        shape = list(t.shape)
        for a, l in zip(kind.axes, t.lanes):
            shape[a] *= l
        return TensorType(t.dtype, tuple(shape))

    if isinstance(kind, Reshape):
        need(1)
        t = input_types[0]
        if t.lanes:
            raise ShapeMismatch("reshape of packed tensor unsupported")
        if math.prod(kind.new_shape) != math.prod(t.shape):
            raise ShapeMismatch(f"reshape {t.shape} -> {kind.new_shape} changes element count")
        return TensorType(t.dtype, kind.new_shape)

    if isinstance(kind, Slice):
        need(1)
        t = input_types[0]
        if t.lanes:
            raise ShapeMismatch("slice of packed tensor unsupported")
        if len(kind.begins) != t.rank or len(kind.ends) != t.rank:
            raise ShapeMismatch("slice bounds rank mismatch")
        for b, e, d in zip(kind.begins, kind.ends, t.shape):
            if not (0 <= b < e <= d):
                raise ShapeMismatch(f"slice [{b},{e}) out of bounds for dim {d}")
        return TensorType(t.dtype, tuple(e - b for b, e in zip(kind.begins, kind.ends)))

    if isinstance(kind, Boxing):
        need(1)
        return input_types[0]

    raise IrError(f"unknown op kind {kind!r}")


def _matmul_type(a: TensorType, b: TensorType) -> TensorType:
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"matmul dtype mismatch: {a} vs {b}")
    if a.rank < 2 or b.rank < 2:
        raise ShapeMismatch("matmul needs rank >= 2")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a} vs {b}")
    batch = a.shape[:-2]

    if not a.lanes and not b.lanes:
        m, ka = a.shape[-2:]
        kb, n = b.shape[-2:]
        if ka != kb:
            raise ShapeMismatch(f"matmul inner dims differ: {a} vs {b}")
        return TensorType(a.dtype, batch + (m, n))

    # Packed matmul conventions: 1-D lanes pack A on K and B on N (contiguous
    # last axes); 2-D lanes pack A on [M,K], B on [K,N], output on [M,N].
    if len(a.lanes) == 1 and len(b.lanes) == 1:
        (lk,) = a.lanes
        (ln,) = b.lanes
        m, ko = a.shape[-2:]
        kb, no = b.shape[-2:]
        if ko * lk != kb:
            raise ShapeMismatch(f"packed matmul K mismatch: {a} vs {b}")
        return TensorType(a.dtype, batch + (m, no), (ln,))

    if len(a.lanes) == 2 and len(b.lanes) == 2:
        lm, lka = a.lanes
        lkb, ln = b.lanes
        if lka != lkb:
            raise ShapeMismatch(f"packed matmul lane mismatch: {a} vs {b}")
        mo, ko = a.shape[-2:]
        kb, no = b.shape[-2:]
        if ko != kb:
            raise ShapeMismatch(f"packed matmul K blocks differ: {a} vs {b}")
        return TensorType(a.dtype, batch + (mo, no), (lm, ln))

    raise ShapeMismatch(f"unsupported packed matmul operands: {a} vs {b}")


# ---------------------------------------------------------------------------
# Graphs


@dataclass
class GraphNode:
    id: int
    op: Op
    inputs: tuple[int, ...]
    type: TensorType
    dist: object = None  # DistributedType annotation, set by the distribution stage


@dataclass
class Graph:
    nodes: list[GraphNode] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)

    def node(self, nid: int) -> GraphNode:
        return self._index()[nid]

    def _index(self) -> dict[int, GraphNode]:
        return {n.id: n for n in self.nodes}

    def add(self, op: Op, inputs: Sequence[int] = ()) -> int:
        idx = self._index()
        in_types = [idx[i].type for i in inputs]
        ty = infer_type(op, in_types)
        nid = max(idx) + 1 if idx else 0
        self.nodes.append(GraphNode(nid, op, tuple(inputs), ty))
        if isinstance(op, Input):
            self.inputs.append(nid)
        return nid

    def consumers(self, nid: int) -> list[int]:
        return [n.id for n in self.nodes if nid in n.inputs]


class GraphBuilder:
    """Convenience wrapper producing well-formed graphs node by node."""

    def __init__(self) -> None:
        self.graph = Graph()

    def input(self, name: str, ty: TensorType) -> int:
        return self.graph.add(Input(name, ty))

    def const(self, values: np.ndarray, dtype: DataType = F32) -> int:
        return self.graph.add(constant(values, dtype))

    def op(self, op: Op, *inputs: int) -> int:
        return self.graph.add(op, inputs)

    def finish(self, *outputs: int) -> Graph:
        self.graph.outputs = list(outputs)
        return self.graph


def topo_order(g: Graph) -> list[int]:
    """Node ids in declaration order, verifying inputs precede consumers."""
    seen: set[int] = set()
    order: list[int] = []
    for n in g.nodes:
        if any(i not in seen for i in n.inputs):
            raise IrError(f"node {n.id} consumes a node that does not precede it")
        seen.add(n.id)
        order.append(n.id)
    return order


def validate_graph(g: Graph) -> list[str]:
    """List of invariant violations; empty iff the graph is well-formed."""
    report: list[str] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        report.append("duplicate node ids")
        return report
    idx = {n.id: n for n in g.nodes}
    seen: set[int] = set()
    for n in g.nodes:
        for i in n.inputs:
            if i not in idx:
                report.append(f"node {n.id}: unknown input {i}")
            elif i not in seen:
                report.append(f"node {n.id}: input {i} does not precede it (cycle or misorder)")
        seen.add(n.id)
        in_types = [idx[i].type for i in n.inputs if i in idx]
        if len(in_types) == len(n.inputs):
            try:
                ty = infer_type(n.op, in_types)
                if ty != n.type:
                    report.append(f"node {n.id}: declared type {n.type} != inferred {ty}")
            except IrError as e:
                report.append(f"node {n.id}: {e}")
        if isinstance(n.op, Input) and n.id not in g.inputs:
            report.append(f"node {n.id}: Input op not listed in graph inputs")
    for i in g.inputs:
        if i not in idx or not isinstance(idx[i].op, Input):
            report.append(f"graph input {i} is not an Input node")
    for o in g.outputs:
        if o not in idx:
            report.append(f"graph output {o} does not exist")
    if not g.outputs:
        report.append("graph has no outputs")
    return report


# ---------------------------------------------------------------------------
# JSON serialization (the CLI's canonical graph format)


def _op_to_json(op: Op) -> tuple[str, dict]:
    if isinstance(op, Input):
        return "input", {"name": op.name}
    if isinstance(op, Constant):
        return "constant", {"data": base64.b64encode(op.data).decode("ascii")}
    if isinstance(op, Unary):
        return "unary", {"fn": op.fn}
    if isinstance(op, Binary):
        return "binary", {"fn": op.fn}
    if isinstance(op, MatMul):
        return "matmul", {}
    if isinstance(op, Transpose):
        return "transpose", {"perm": list(op.perm)}
    if isinstance(op, Pack):
        return "pack", {"lanes": list(op.lanes), "axes": list(op.axes)}
    if isinstance(op, Unpack):
        return "unpack", {"axes": list(op.axes)}
    if isinstance(op, Reshape):
        return "reshape", {"new_shape": list(op.new_shape)}
    if isinstance(op, Slice):
        return "slice", {"begins": list(op.begins), "ends": list(op.ends)}
    if isinstance(op, Boxing):
        target = op.target
        return "boxing", {"target": target if isinstance(target, str) else target.to_json()}
    raise IrError(f"unserializable op {op!r}")


def _op_from_json(kind: str, attrs: dict, ty: TensorType) -> Op:
    if kind == "input":
        return Input(attrs["name"], ty)
    if kind == "constant":
        return Constant(ty, base64.b64decode(attrs["data"]))
    if kind == "unary":
        return Unary(attrs["fn"])
    if kind == "binary":
        return Binary(attrs["fn"])
    if kind == "matmul":
        return MatMul()
    if kind == "transpose":
        return Transpose(tuple(attrs["perm"]))
    if kind == "pack":
        return Pack(tuple(attrs["lanes"]), tuple(attrs["axes"]))
    if kind == "unpack":
        return Unpack(tuple(attrs["axes"]))
    if kind == "reshape":
        return Reshape(tuple(attrs["new_shape"]))
    if kind == "slice":
        return Slice(tuple(attrs["begins"]), tuple(attrs["ends"]))
    if kind == "boxing":
        target = attrs["target"]
        if isinstance(target, str):
            return Boxing(target)
        from .sbp import DistributedType

        return Boxing(DistributedType.from_json(target))
    raise IrError(f"unknown op kind {kind!r}")


def graph_to_json(g: Graph) -> dict:
    nodes = []
    for n in g.nodes:
        kind, attrs = _op_to_json(n.op)
        entry = {
            "id": n.id,
            "kind": kind,
            "attrs": attrs,
            "inputs": list(n.inputs),
            "dtype": n.type.dtype.kind,
            "shape": list(n.type.shape),
            "lanes": list(n.type.lanes),
        }
        if n.dist is not None:
            entry["ndsbp"] = n.dist.ndsbp.to_json()
            entry["placement"] = list(n.dist.placement.dims)
        nodes.append(entry)
    return {"nodes": nodes, "inputs": list(g.inputs), "outputs": list(g.outputs)}


def graph_from_json(doc: dict) -> Graph:
    g = Graph()
    for entry in doc["nodes"]:
        ty = TensorType(
            DataType(entry["dtype"]), tuple(entry["shape"]), tuple(entry.get("lanes", []))
        )
        op = _op_from_json(entry["kind"], entry.get("attrs", {}), ty)
        node = GraphNode(entry["id"], op, tuple(entry["inputs"]), ty)
        if "ndsbp" in entry:
            from .sbp import DistributedType, NdSbp, Placement

            node.dist = DistributedType(
                ty, Placement(tuple(entry["placement"])), NdSbp.from_json(entry["ndsbp"])
            )
        g.nodes.append(node)
    g.inputs = list(doc["inputs"])
    g.outputs = list(doc["outputs"])
    return g


def save_graph(g: Graph, path: str) -> None:
    with open(path, "w") as f:
        json.dump(graph_to_json(g), f, indent=1, sort_keys=True)


def load_graph(path: str) -> Graph:
    with open(path) as f:
        return graph_from_json(json.load(f))
