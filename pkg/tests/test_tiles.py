import numpy as np
import pytest

from minicase.ir import Binary, GraphBuilder, Graph, MatMul, Unary, tensor
from minicase.presets import attention_graph
from minicase.tiles import (
    BadPermutation,
    IllegalMerge,
    ScheduleState,
    apply_action,
    init_tile_graph,
    legal_actions,
    merge,
    reachable_states,
    reorder,
)


def attention_state():
    g = attention_graph(8, 8, 8, 8)
    return ScheduleState(init_tile_graph(g, 3)), g


def test_init_structure_matches_tiered_listing():
    st, g = attention_state()
    ttg = st.ttg
    mm1, ex, mm2 = [op.op_id for op in ttg.ops]
    assert ttg.num_levels == 3
    # Level-0 nodes wrap single operators with empty loop sets.
    for op_id in (mm1, ex, mm2):
        leaf = ttg.find_node(op_id, 0)
        assert leaf.loops == () and leaf.children == ()
    # Matmuls iterate 3 dims, the elementwise 2; chains are unfused columns.
    assert len(ttg.find_node(mm1, 2).loops) == 3
    assert len(ttg.find_node(ex, 2).loops) == 2
    assert len(ttg.find_node(mm2, 2).loops) == 3
    assert [r.owner for r in ttg.roots] == [mm1, ex, mm2]
    # Consumer's reduction dim is the producer's output dim (shared names).
    assert set(ttg.op_info(ex).dims) < set(ttg.op_info(mm1).dims)


def test_merge_moves_children_and_unions_loops():
    st, _ = attention_state()
    mm1, ex, mm2 = [op.op_id for op in st.ttg.ops]
    st2 = merge(st, ex, mm2, 2)
    merged = st2.ttg.find_node(mm2, 2)
    assert [c.owner for c in merged.children] == [ex, mm2]
    assert set(st2.ttg.find_node(mm2, 2).loops) == set(st.ttg.find_node(mm2, 2).loops) | set(
        st.ttg.find_node(ex, 2).loops
    )
    assert st2.ttg.find_node(ex, 2) is None  # src column gone at the merge level
    assert st2.ttg.find_node(ex, 1) is not None


def test_merge_requires_dependency():
    st, _ = attention_state()
    mm1, ex, mm2 = [op.op_id for op in st.ttg.ops]
    with pytest.raises(IllegalMerge):
        merge(st, mm1, mm2, 2)  # mm1 feeds ex, not mm2 directly
    with pytest.raises(IllegalMerge):
        merge(st, mm2, ex, 2)  # consumer into producer is not legal
    with pytest.raises(IllegalMerge):
        merge(st, ex, ex, 2)


def test_merge_below_top_requires_outer_merge_first():
    st, _ = attention_state()
    mm1, ex, mm2 = [op.op_id for op in st.ttg.ops]
    with pytest.raises(IllegalMerge):
        merge(st, ex, mm2, 1)  # not siblings until merged at level 2
    st2 = merge(st, ex, mm2, 2)
    st3 = merge(st2, ex, mm2, 1)  # now legal
    l1 = st3.ttg.find_node(mm2, 1)
    assert [c.owner for c in l1.children] == [ex, mm2]


def test_reorder_identity_keeps_structure():
    st, _ = attention_state()
    mm1 = st.ttg.ops[0].op_id
    node = st.ttg.find_node(mm1, 2)
    st2 = reorder(st, mm1, 2, node.loops)
    assert st2.ttg.state_key() == st.ttg.state_key()


def test_reorder_roundtrip():
    st, _ = attention_state()
    mm1 = st.ttg.ops[0].op_id
    node = st.ttg.find_node(mm1, 2)
    perm = (node.loops[1], node.loops[0], node.loops[2])
    st2 = reorder(st, mm1, 2, perm)
    assert st2.ttg.state_key() != st.ttg.state_key()
    st3 = reorder(st2, mm1, 2, node.loops)
    assert st3.ttg.state_key() == st.ttg.state_key()


def test_reorder_bad_permutation():
    st, _ = attention_state()
    mm1 = st.ttg.ops[0].op_id
    with pytest.raises(BadPermutation):
        reorder(st, mm1, 2, ("bogus", "loops", "here"))


def test_single_op_two_levels_chain():
    b = GraphBuilder()
    x = b.input("x", tensor([4, 4]))
    y = b.op(Unary("exp"), x)
    g = b.finish(y)
    ttg = init_tile_graph(g, 2)
    assert len(ttg.roots) == 1
    root = ttg.roots[0]
    assert root.level == 1 and len(root.children) == 1
    assert root.children[0].level == 0


def test_empty_subgraph():
    g = Graph()
    ttg = init_tile_graph(g, 3)
    assert ttg.roots == () and ttg.ops == ()


def test_merge_then_interpret_unchanged():
    from minicase.costs import default_ukernel_model, desk_machine
    from minicase.interp import eval_scheduled, eval_single
    from minicase.minlp import build_model, solve
    from minicase.presets import random_inputs

    hw = desk_machine()
    ukm = default_ukernel_model(hw)
    g = attention_graph(8, 8, 8, 8)
    ins = {k: v * 0.1 for k, v in random_inputs(g, seed=2).items()}
    ref = eval_single(g, ins)
    st = ScheduleState(init_tile_graph(g, 3))
    mm1, ex, mm2 = [op.op_id for op in st.ttg.ops]
    st2 = merge(st, ex, mm2, 2)
    for state in (st, st2):
        sol = solve(build_model(state.ttg, hw, ukm))
        outs, _ = eval_scheduled(state.ttg, sol, ins, hw)
        out = next(iter(outs.values()))
        scale = max(np.abs(ref).max(), 1e-30)
        assert np.abs(out - ref).max() / scale < 1e-4


def test_reachable_states_deduplicates():
    b = GraphBuilder()
    x = b.input("x", tensor([4, 4]))
    y = b.input("y", tensor([4, 4]))
    s = b.op(Binary("add"), x, y)
    e = b.op(Unary("exp"), s)
    g = b.finish(e)
    st = ScheduleState(init_tile_graph(g, 3))
    states = reachable_states(st)
    assert st.key() in states
    assert len(states) == len({s for s in states})
    assert len(states) <= 200


def test_legal_actions_cover_merges_and_reorders():
    st, _ = attention_state()
    acts = legal_actions(st)
    kinds = {a.kind for a in acts}
    assert kinds == {"merge", "reorder"}
    for a in acts:
        apply_action(st, a)  # every advertised action must be applicable
