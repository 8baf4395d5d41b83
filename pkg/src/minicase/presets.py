"""Bundled example graphs exercised by the CLI, the tests, and the reports."""
from __future__ import annotations

import numpy as np

from .ir import (
    F32,
    Binary,
    Graph,
    GraphBuilder,
    MatMul,
    Transpose,
    Unary,
    tensor,
)


def fig2_graph() -> Graph:
    """Phase-ordering demonstration: three transposes, all removable.

    root = T([1,0])( Add( T([1,0])(x), Exp(T([1,0])(v)) ) )

    Pushing the left transpose up lets both wrapper pairs fold away; applying
    the binary-right rule first never fires (the right operand is the Exp),
    leaving all three transposes behind.
    """
    b = GraphBuilder()
    x = b.input("x", tensor([4, 6]))
    v = b.input("v", tensor([4, 6]))
    t1 = b.op(Transpose((1, 0)), x)
    t2 = b.op(Transpose((1, 0)), v)
    u = b.op(Unary("exp"), t2)
    add = b.op(Binary("add"), t1, u)
    t3 = b.op(Transpose((1, 0)), add)
    return b.finish(t3)


LEFT_FIRST_ORDER = (
    "CombineBinaryLeftTrans",
    "CombineUnaryTrans",
    "FoldTwoTrans",
    "FoldNopTrans",
)
RIGHT_FIRST_ORDER = (
    "CombineBinaryRightTrans",
    "CombineUnaryTrans",
    "FoldTwoTrans",
    "FoldNopTrans",
)


def attention_graph(m: int = 32, k: int = 32, n: int = 32, d: int = 32) -> Graph:
    """Attention-like chain O = MatMul(Exp(MatMul(Q, K)), V)."""
    b = GraphBuilder()
    q = b.input("q", tensor([m, k]))
    kk = b.input("k", tensor([k, n]))
    v = b.input("v", tensor([n, d]))
    s = b.op(MatMul(), q, kk)
    e = b.op(Unary("exp"), s)
    o = b.op(MatMul(), e, v)
    return b.finish(o)


def mlp2_graph(batch: int = 8, hidden: int = 8) -> Graph:
    """Two matmuls with a bias add, the distribution-search example."""
    b = GraphBuilder()
    x = b.input("x", tensor([batch, hidden]))
    w1 = b.input("w1", tensor([hidden, hidden]))
    bias = b.input("bias", tensor([batch, hidden]))
    w2 = b.input("w2", tensor([hidden, hidden]))
    h = b.op(MatMul(), x, w1)
    a = b.op(Binary("add"), h, bias)
    y = b.op(MatMul(), a, w2)
    return b.finish(y)


def tile_mm_graph(dim: int = 64) -> Graph:
    """Square matmul used by the scheduling and tiling examples."""
    b = GraphBuilder()
    a = b.input("a", tensor([dim, dim]))
    bb = b.input("b", tensor([dim, dim]))
    c = b.op(MatMul(), a, bb)
    return b.finish(c)


BUNDLED = {
    "fig2": fig2_graph,
    "attention": attention_graph,
    "mlp2": mlp2_graph,
    "tile_mm": tile_mm_graph,
}


def random_inputs(g: Graph, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic random inputs in [-1, 1) for every graph input."""
    from . import ir

    rng = np.random.default_rng(seed)
    out = {}
    for nid in g.inputs:
        node = g.node(nid)
        assert isinstance(node.op, ir.Input)
        shape = node.type.shape + node.type.lanes
        out[node.op.name] = (rng.random(shape, dtype=np.float32) * 2 - 1).astype(np.float32)
    return out
