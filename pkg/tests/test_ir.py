import numpy as np
import pytest

from minicase import ir
from minicase.ir import (
    F16,
    F32,
    ArityMismatch,
    Binary,
    GraphBuilder,
    IndivisiblePack,
    Input,
    MatMul,
    Pack,
    Reshape,
    ShapeMismatch,
    Slice,
    Transpose,
    Unary,
    Unpack,
    graph_from_json,
    graph_to_json,
    infer_type,
    perm_compose,
    perm_inverse,
    tensor,
    validate_graph,
)


def test_matmul_shape():
    out = infer_type(MatMul(), [tensor([4, 8]), tensor([8, 3])])
    assert out == tensor([4, 3])


def test_transpose_shape():
    out = infer_type(Transpose((1, 0)), [tensor([2, 3])])
    assert out == tensor([3, 2])


def test_pack_blocked_layout():
    out = infer_type(Pack((16, 16), (0, 1)), [tensor([32, 48])])
    assert out.shape == (2, 3)
    assert out.lanes == (16, 16)
    assert out.elem_count == 32 * 48


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatch):
        infer_type(MatMul(), [tensor([4, 8]), tensor([7, 3])])


def test_arity_mismatch():
    with pytest.raises(ArityMismatch):
        infer_type(MatMul(), [tensor([4, 8])])


def test_indivisible_pack():
    with pytest.raises(IndivisiblePack):
        infer_type(Pack((16,), (0,)), [tensor([33, 4])])


def test_packed_matmul_types():
    a = infer_type(Pack((16, 16), (0, 1)), [tensor([32, 64])])
    b = infer_type(Pack((16, 16), (0, 1)), [tensor([64, 48])])
    out = infer_type(MatMul(), [a, b])
    assert out.shape == (2, 3) and out.lanes == (16, 16)
    a1 = infer_type(Pack((8,), (1,)), [tensor([32, 64])])
    b1 = infer_type(Pack((8,), (1,)), [tensor([64, 48])])
    out1 = infer_type(MatMul(), [a1, b1])
    assert out1.shape == (32, 6) and out1.lanes == (8,)


def test_transpose_roundtrip_types():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rank = rng.integers(1, 5)
        shape = [int(d) for d in rng.integers(1, 7, rank)]
        perm = tuple(int(p) for p in rng.permutation(rank))
        t = tensor(shape)
        once = infer_type(Transpose(perm), [t])
        back = infer_type(Transpose(perm_inverse(perm)), [once])
        assert back == t


def test_pack_unpack_identity_types():
    rng = np.random.default_rng(1)
    for _ in range(50):
        rank = int(rng.integers(1, 4))
        lanes_n = int(rng.integers(1, rank + 1))
        axes = tuple(sorted(rng.choice(rank, lanes_n, replace=False).tolist()))
        lanes = tuple(int(l) for l in rng.integers(1, 5, lanes_n))
        shape = [int(d) for d in rng.integers(1, 5, rank)]
        for a, l in zip(axes, lanes):
            shape[a] *= l
        t = tensor(shape)
        packed = infer_type(Pack(lanes, axes), [t])
        unpacked = infer_type(Unpack(axes), [packed])
        assert unpacked == t


def test_validate_well_formed_chain():
    b = GraphBuilder()
    x = b.input("x", tensor([2, 2]))
    y = b.op(Unary("exp"), x)
    z = b.op(Unary("neg"), y)
    g = b.finish(z)
    assert validate_graph(g) == []


def test_validate_detects_cycle():
    b = GraphBuilder()
    x = b.input("x", tensor([2, 2]))
    y = b.op(Unary("exp"), x)
    g = b.finish(y)
    g.nodes[1].inputs = (2,)  # consume a node that comes later
    g.nodes.append(ir.GraphNode(2, Unary("neg"), (1,), tensor([2, 2])))
    report = validate_graph(g)
    assert any("precede" in line for line in report)


def test_validate_detects_shape_violation():
    b = GraphBuilder()
    a = b.input("a", tensor([4, 8]))
    c = b.input("c", tensor([7, 3]))
    g = b.graph
    g.nodes.append(ir.GraphNode(99, MatMul(), (a, c), tensor([4, 3])))
    g.outputs = [99]
    report = validate_graph(g)
    assert any("99" in line for line in report)


def _random_graph(seed: int) -> ir.Graph:
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    shape = [int(rng.integers(2, 5)) * 2, int(rng.integers(2, 5)) * 2]
    nodes = [b.input(f"in{i}", tensor(shape)) for i in range(int(rng.integers(1, 4)))]
    for i in range(int(rng.integers(1, 8))):
        kind = rng.integers(0, 4)
        src = int(rng.choice(nodes))
        if kind == 0:
            nodes.append(b.op(Unary(str(rng.choice(["exp", "neg", "abs"]))), src))
        elif kind == 1:
            other = int(rng.choice(nodes))
            if b.graph.node(src).type == b.graph.node(other).type:
                nodes.append(b.op(Binary(str(rng.choice(["add", "mul", "sub"]))), src, other))
        elif kind == 2:
            rank = b.graph.node(src).type.rank
            perm = tuple(int(p) for p in rng.permutation(rank))
            nodes.append(b.op(Transpose(perm), src))
        else:
            ty = b.graph.node(src).type
            if all(d % 2 == 0 for d in ty.shape) and not ty.lanes:
                p = b.op(Pack((2,), (0,)), src)
                nodes.append(b.op(Unpack((0,)), p))
    return b.finish(nodes[-1])


def test_builders_produce_valid_graphs():
    for seed in range(30):
        g = _random_graph(seed)
        assert validate_graph(g) == [], f"seed {seed}"


def test_json_roundtrip():
    from minicase.presets import BUNDLED

    for name, builder in BUNDLED.items():
        g = builder()
        doc = graph_to_json(g)
        g2 = graph_from_json(doc)
        assert graph_to_json(g2) == doc, name
        assert validate_graph(g2) == []


def test_constant_payload_roundtrip():
    values = np.arange(6, dtype=np.float32).reshape(2, 3)
    c = ir.constant(values)
    assert np.array_equal(c.to_array(), values)
    b = GraphBuilder()
    cid = b.graph.add(c)
    g = b.finish(cid)
    g2 = graph_from_json(graph_to_json(g))
    assert np.array_equal(g2.node(cid).op.to_array(), values)


def test_f16_byte_width():
    assert F32.byte_width == 4
    assert F16.byte_width == 2
    assert tensor([4, 4], F16).byte_size == 32


def test_perm_compose_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.random((2, 3, 4))
    for _ in range(20):
        p1 = tuple(int(p) for p in rng.permutation(3))
        p2 = tuple(int(p) for p in rng.permutation(3))
        combined = perm_compose(p1, p2)
        assert np.array_equal(
            np.transpose(np.transpose(x, p1), p2), np.transpose(x, combined)
        )
