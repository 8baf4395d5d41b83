"""Rewrite rules: transpose combination/folding and pack/unpack layout exploration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import ir
from .egraph import EClassId, EGraph, ENode
from .ir import Binary, MatMul, Pack, Transpose, Unary, Unpack, perm_compose, perm_inverse


@dataclass(frozen=True)
class Match:
    root: EClassId  # class the rewritten term is unioned into
    env: tuple  # rule-specific bindings


@dataclass(frozen=True)
class RewriteRule:
    """Non-destructive match/apply pair: applying adds terms, never removes."""

    name: str
    matcher: Callable[[EGraph], list[Match]]
    applier: Callable[[EGraph, Match], EClassId]


def apply_all(eg: EGraph, rules: Sequence[RewriteRule]) -> int:
    """Apply every rule to every match found against the pre-call snapshot."""
    matches: list[tuple[RewriteRule, Match]] = []
    for rule in rules:
        matches.extend((rule, m) for m in rule.matcher(eg))
    before = eg.version
    for rule, m in matches:
        root = eg.find(m.root)
        if root not in eg.classes:
            continue
        new_id = rule.applier(eg, m)
        eg.union(root, new_id)
    eg.rebuild()
    return eg.version - before


def _scan(eg: EGraph, pred: Callable[[ir.Op], bool]) -> Iterable[tuple[EClassId, ENode]]:
    for cid in eg.class_ids():
        for n in eg.nodes_of(cid):
            if pred(n.op):
                yield cid, n


# ---------------------------------------------------------------------------
# Transpose rules


def _match_fold_nop_trans(eg: EGraph) -> list[Match]:
    out = []
    for cid, n in _scan(eg, lambda op: isinstance(op, Transpose)):
        if n.op.perm == tuple(range(len(n.op.perm))):
            out.append(Match(cid, (n.children[0],)))
    return out


def _apply_fold_nop_trans(eg: EGraph, m: Match) -> EClassId:
    return eg.find(m.env[0])


def _match_fold_two_trans(eg: EGraph) -> list[Match]:
    out = []
    for cid, n in _scan(eg, lambda op: isinstance(op, Transpose)):
        inner_cid = eg.find(n.children[0])
        for inner in eg.nodes_of(inner_cid):
            if isinstance(inner.op, Transpose):
                out.append(Match(cid, (n.op.perm, inner.op.perm, inner.children[0])))
    return out


def _apply_fold_two_trans(eg: EGraph, m: Match) -> EClassId:
    perm2, perm1, arg = m.env
    return eg.add_term(Transpose(perm_compose(perm1, perm2)), [eg.find(arg)])


def _match_combine_unary_trans(eg: EGraph) -> list[Match]:
    out = []
    for cid, n in _scan(eg, lambda op: isinstance(op, Unary)):
        inner_cid = eg.find(n.children[0])
        for inner in eg.nodes_of(inner_cid):
            if isinstance(inner.op, Transpose):
                out.append(Match(cid, (n.op, inner.op.perm, inner.children[0])))
    return out


def _apply_combine_unary_trans(eg: EGraph, m: Match) -> EClassId:
    un, perm, arg = m.env
    u = eg.add_term(un, [eg.find(arg)])
    return eg.add_term(Transpose(perm), [u])


def _match_combine_binary_trans(eg: EGraph, side: int) -> list[Match]:
    out = []
    for cid, n in _scan(eg, lambda op: isinstance(op, Binary)):
        t_cid = eg.find(n.children[side])
        other = eg.find(n.children[1 - side])
        for inner in eg.nodes_of(t_cid):
            if isinstance(inner.op, Transpose):
                out.append(Match(cid, (n.op, side, inner.op.perm, inner.children[0], other)))
    return out


def _apply_combine_binary_trans(eg: EGraph, m: Match) -> EClassId:
    bin_op, side, perm, arg, other = m.env
    moved = eg.add_term(Transpose(perm_inverse(perm)), [eg.find(other)])
    operands = [eg.find(arg), moved] if side == 0 else [moved, eg.find(arg)]
    b = eg.add_term(bin_op, operands)
    return eg.add_term(Transpose(perm), [b])


def rules_transpose() -> list[RewriteRule]:
    return [
        RewriteRule(
            "CombineBinaryLeftTrans",
            lambda eg: _match_combine_binary_trans(eg, 0),
            _apply_combine_binary_trans,
        ),
        RewriteRule(
            "CombineBinaryRightTrans",
            lambda eg: _match_combine_binary_trans(eg, 1),
            _apply_combine_binary_trans,
        ),
        RewriteRule("CombineUnaryTrans", _match_combine_unary_trans, _apply_combine_unary_trans),
        RewriteRule("FoldTwoTrans", _match_fold_two_trans, _apply_fold_two_trans),
        RewriteRule("FoldNopTrans", _match_fold_nop_trans, _apply_fold_nop_trans),
    ]


# ---------------------------------------------------------------------------
# Vectorization rules


@dataclass(frozen=True)
class VectorizeConfig:
    lane_options: tuple[tuple[int, ...], ...] = ((8,), (16, 16))
    max_pack_rank: int = 2


def _pack_plan(op: ir.Op, in_types: Sequence[ir.TensorType], lanes: tuple[int, ...]):
    """Per-operand (lanes, axes) pack specs plus the output unpack axes, or None.

    Elementwise ops pack trailing axes uniformly; matmul packs A on [M,K],
    B on [K,N] for 2-D lanes and A on K, B on N for 1-D lanes.
    """
    if isinstance(op, (Unary, Binary)):
        t = in_types[0]
        r = t.rank
        if len(lanes) > r:
            return None
        axes = tuple(range(r - len(lanes), r))
        for inp in in_types:
            for a, l in zip(axes, lanes):
                if inp.shape[a] % l != 0:
                    return None
        return [(lanes, axes)] * len(in_types), axes

    if isinstance(op, MatMul):
        a, b = in_types
        if a.rank != 2 or b.rank != 2:
            return None
        m, k = a.shape
        k2, n = b.shape
        if len(lanes) == 1:
            (l,) = lanes
            if k % l != 0 or n % l != 0:
                return None
            return [((l,), (1,)), ((l,), (1,))], (1,)
        if len(lanes) == 2:
            la, lb = lanes
            if m % la != 0 or k % lb != 0 or n % lb != 0:
                return None
            return [((la, lb), (0, 1)), ((lb, lb), (0, 1))], (0, 1)
    return None


def _match_meta_pack(eg: EGraph, config: VectorizeConfig) -> list[Match]:
    out = []
    packable = lambda op: isinstance(op, (Unary, Binary, MatMul))
    for cid, n in _scan(eg, packable):
        ty = eg.type_of(cid)
        if not isinstance(ty, ir.TensorType) or ty.lanes:
            continue
        in_types = [eg.type_of(c) for c in n.children]
        if any(t.lanes for t in in_types):
            continue
        for lanes in config.lane_options:
            if len(lanes) > config.max_pack_rank:
                continue
            if _pack_plan(n.op, in_types, lanes) is not None:
                out.append(Match(cid, (n.op, n.children, lanes)))
    return out


def _apply_meta_pack(eg: EGraph, m: Match) -> EClassId:
    op, children, lanes = m.env
    in_types = [eg.type_of(c) for c in children]
    plan = _pack_plan(op, in_types, lanes)
    assert plan is not None
    specs, out_axes = plan
    packed_args = [
        eg.add_term(Pack(sp_lanes, sp_axes), [eg.find(c)])
        for (sp_lanes, sp_axes), c in zip(specs, children)
    ]
    packed_op = eg.add_term(op, packed_args)
    return eg.add_term(Unpack(out_axes), [packed_op])


def _match_fold_nop_pack(eg: EGraph) -> list[Match]:
    out = []
    for cid, n in _scan(eg, lambda op: isinstance(op, Pack)):
        inner_cid = eg.find(n.children[0])
        for inner in eg.nodes_of(inner_cid):
            if not isinstance(inner.op, Unpack):
                continue
            src = eg.find(inner.children[0])
            src_ty = eg.type_of(src)
            if (
                isinstance(src_ty, ir.TensorType)
                and inner.op.axes == n.op.axes
                and src_ty.lanes == n.op.lanes
            ):
                out.append(Match(cid, (src,)))
    return out


def _apply_fold_nop_pack(eg: EGraph, m: Match) -> EClassId:
    return eg.find(m.env[0])


def rules_vectorize(config: VectorizeConfig | None = None) -> list[RewriteRule]:
    config = config or VectorizeConfig()
    if not config.lane_options:
        raise ValueError("lane_options must be non-empty")
    return [
        RewriteRule(
            "MetaPackOperation",
            lambda eg: _match_meta_pack(eg, config),
            _apply_meta_pack,
        ),
        RewriteRule("FoldNopPack", _match_fold_nop_pack, _apply_fold_nop_pack),
    ]


def rule_set(names: Iterable[str], config: VectorizeConfig | None = None) -> list[RewriteRule]:
    """Rule sets by CLI name: 'transpose' and/or 'vectorize'."""
    out: list[RewriteRule] = []
    for name in names:
        if name == "transpose":
            out.extend(rules_transpose())
        elif name == "vectorize":
            out.extend(rules_vectorize(config))
        else:
            raise ValueError(f"unknown rule set {name!r}")
    return out
