"""Exact tile-size and buffer-placement optimization for a fixed tile structure.

Model conventions (used consistently by the builder, the solver, the
independent checker, and the scheduled interpreter):

- Memory levels are numbered 0 (innermost cache) to L-1 (outermost).  Tile
  variables live at levels >= 1; per operator and dim the chain product of
  tile variables equals the full extent (domain cover).
- A placement entry e at a level-l node sits inside the first e loops of that
  node: loops at positions >= e are inside the buffer's reuse scope and
  multiply its extent; loops at positions < e multiply its visit count.
- Each buffer access (op, buffer) owns a placement chain: a pinned zero-cost
  home at the outermost level for graph I/O and unfused intermediates, an
  active copy stored at level 0, and at most one mid-level copy per level in
  between.  A copy stored at sl refilled from the next-outer copy at sl' moves
  size*visits bytes through every level in [sl, sl'].
- Fused intermediates (producer and consumers under one merged subtree) get a
  single shared placement at the subtree root's level, stored at level 0; they
  never touch the outermost memory.
- Analytic traffic counts each copy once per visit (reads and writes alike);
  the reference interpreter charges read-modify-write copies 2v-1 times, so
  the two agree within a factor of two by construction.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .costs import HardwareSpec, UKernelModel, ukernel_time
from .tiles import BufferSpec, OpInfo, ScheduleError, TieredTileGraph, TileNode


class MinlpError(Exception):
    pass


class Infeasible(MinlpError):
    pass


NodeKey = tuple[int, int]  # (owner op id, level)
TileAssignment = dict[tuple[int, int, str], int]  # (owner, level, dim) -> tile size


@dataclass(frozen=True)
class Position:
    node: NodeKey
    entry: int


@dataclass(frozen=True)
class PlacementRec:
    op_id: Optional[int]  # None for shared fused placements
    buffer: str
    position: Position
    sl: int
    role: str  # "read" | "write" | "home" | "fused"
    size_bytes: int
    visits: int


@dataclass
class MinlpModel:
    ttg: TieredTileGraph
    hw: HardwareSpec
    ukm: UKernelModel
    chains: dict[int, list[TileNode]]  # op id -> chain, outermost first
    accesses: list[tuple[int, str, str]]  # (op, buffer, read|write) needing placements
    fused: dict[str, tuple[TileNode, int]]  # buffer -> (scope node, producer op)
    top: int


@dataclass
class MinlpSolution:
    tiles: TileAssignment
    placements: list[PlacementRec]
    t_comp: float
    t_mem: float
    objective: float
    optimal: bool


# ---------------------------------------------------------------------------
# Model construction


def build_model(ttg: TieredTileGraph, hw: HardwareSpec, ukm: UKernelModel) -> MinlpModel:
    if len(hw.levels) != ttg.num_levels:
        raise MinlpError(
            f"hardware has {len(hw.levels)} levels but tile graph has {ttg.num_levels}"
        )
    chains = {op.op_id: ttg.chain_of(op.op_id) for op in ttg.ops}

    producers: dict[str, int] = {}
    consumers: dict[str, list[int]] = {}
    for op in ttg.ops:
        for b in op.writes:
            producers[b] = op.op_id
        for b in op.reads:
            consumers.setdefault(b, []).append(op.op_id)

    fused: dict[str, tuple[TileNode, int]] = {}
    for buf in ttg.buffers:
        if buf.is_io or buf.name not in producers or buf.name not in consumers:
            continue
        scope = _common_scope(ttg, [producers[buf.name]] + consumers[buf.name])
        if scope is not None:
            fused[buf.name] = (scope, producers[buf.name])

    accesses: list[tuple[int, str, str]] = []
    for op in ttg.ops:
        for b in op.reads:
            if b not in fused:
                accesses.append((op.op_id, b, "read"))
        for b in op.writes:
            if b not in fused:
                accesses.append((op.op_id, b, "write"))

    return MinlpModel(ttg, hw, ukm, chains, accesses, fused, ttg.num_levels - 1)


def _common_scope(ttg: TieredTileGraph, op_ids: Sequence[int]) -> Optional[TileNode]:
    """Smallest single subtree containing every op, or None when they span roots."""
    best: Optional[TileNode] = None
    for node in ttg.walk():
        if set(op_ids) <= ttg.subtree_ops(node):
            if best is None or node.level < best.level:
                best = node
    return best


# ---------------------------------------------------------------------------
# Derived quantities for a concrete tile assignment


def _tv(tiles: TileAssignment, node: TileNode, dim: str) -> int:
    return tiles.get((node.owner, node.level, dim), 1)


def node_trip(tiles: TileAssignment, node: TileNode) -> int:
    return math.prod(_tv(tiles, node, d) for d in node.loops)


def extent(model: MinlpModel, tiles: TileAssignment, op_id: int, pos: Position, dim: str) -> int:
    """Data extent of `dim` inside position `pos` along the op's chain."""
    chain = model.chains[op_id]
    ext = 1
    for node in chain:
        key = (node.owner, node.level)
        if node.level < pos.node[1]:
            ext *= _tv(tiles, node, dim)
        elif key == pos.node:
            for i, loop in enumerate(node.loops):
                if i >= pos.entry and loop == dim:
                    ext *= _tv(tiles, node, dim)
    return ext


def visits(model: MinlpModel, tiles: TileAssignment, op_id: int, pos: Position) -> int:
    """Times the position is entered: all enclosing loop trips."""
    chain = model.chains[op_id]
    v = 1
    for node in chain:
        key = (node.owner, node.level)
        if node.level > pos.node[1]:
            v *= node_trip(tiles, node)
        elif key == pos.node:
            for i, loop in enumerate(node.loops):
                if i < pos.entry:
                    v *= _tv(tiles, node, loop)
    return v


def buffer_size(model: MinlpModel, tiles: TileAssignment, op_id: int, buf: BufferSpec,
                pos: Position) -> int:
    elems = math.prod(extent(model, tiles, op_id, pos, d) for d in buf.dims)
    return elems * buf.elem_bytes


def invocations(model: MinlpModel, tiles: TileAssignment, op_id: int) -> int:
    return math.prod(node_trip(tiles, node) for node in model.chains[op_id])


def t_comp(model: MinlpModel, tiles: TileAssignment) -> float:
    total = 0.0
    for op in model.ttg.ops:
        per = ukernel_time(op.kind, op.unit, op.flops_per_point, model.ukm)
        total += per * invocations(model, tiles, op.op_id)
    return total


# ---------------------------------------------------------------------------
# Tile-variable enumeration (divisor domains, cover constraint exact)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _dim_assignments(model: MinlpModel, dim: str) -> list[dict[tuple[int, int], int]]:
    """All TV assignments for one dim over the nodes carrying it (cover holds)."""
    ttg = model.ttg
    full = ttg.extent(dim)
    carrying_roots = [r for r in ttg.roots if _carries(r, dim)]

    def expand(node: TileNode, remaining: int) -> list[dict[tuple[int, int], int]]:
        kids = [c for c in node.children if _carries(c, dim)]
        here: list[dict[tuple[int, int], int]] = []
        choices = _divisors(remaining) if kids else [remaining]
        for t in choices:
            below = remaining // t
            child_sets: list[list[dict[tuple[int, int], int]]] = []
            ok = True
            for ch in kids:
                sub = expand(ch, below)
                if not sub:
                    ok = False
                    break
                child_sets.append(sub)
            if not ok:
                continue
            for combo in itertools.product(*child_sets):
                merged: dict[tuple[int, int], int] = {(node.owner, node.level): t}
                for part in combo:
                    merged.update(part)
                here.append(merged)
        return here

    if not carrying_roots:
        return [{}]
    per_root = [expand(r, full) for r in carrying_roots]
    out = []
    for combo in itertools.product(*per_root):
        merged: dict[tuple[int, int], int] = {}
        for part in combo:
            merged.update(part)
        out.append(merged)
    return out


def _carries(node: TileNode, dim: str) -> bool:
    if dim in node.loops:
        return True
    return any(_carries(c, dim) for c in node.children)


def reduction_dims(model: MinlpModel) -> set[str]:
    """Iteration dims reduced away by some op (absent from its output buffer)."""
    out: set[str] = set()
    for op in model.ttg.ops:
        written = set(model.ttg.buffer(op.writes[0]).dims)
        out |= {d for d in op.dims if d not in written}
    return out


def tile_assignments(model: MinlpModel, untiled_reductions: bool = False) -> list[TileAssignment]:
    """Cross product of per-dim assignments, deterministic order.

    With untiled_reductions, reduction dims keep their full extent at a single
    level, preserving f32 summation order for bit-exact execution.
    """
    dims = [d for d, _ in model.ttg.dim_extents]
    red = reduction_dims(model) if untiled_reductions else set()
    per_dim = []
    for d in dims:
        opts = _dim_assignments(model, d)
        if d in red:
            full = model.ttg.extent(d)
            opts = [m for m in opts if all(t in (1, full) for t in m.values())]
        opts.sort(key=lambda m: sorted(m.items()))
        per_dim.append([(d, m) for m in opts])
    out: list[TileAssignment] = []
    for combo in itertools.product(*per_dim):
        tiles: TileAssignment = {}
        for d, m in combo:
            for (owner, level), t in m.items():
                tiles[(owner, level, d)] = t
        out.append(tiles)
    return out


# ---------------------------------------------------------------------------
# Placement candidates for a concrete tile assignment


@dataclass(frozen=True)
class Candidate:
    """One placement chain for a buffer access: per-level traffic and occupancy."""

    placements: tuple[PlacementRec, ...]
    traffic_bytes: tuple[int, ...]  # per level
    occupancy: tuple[int, ...]  # bytes resident per level
    root_owner: int  # top-level subtree the access belongs to


def _positions(model: MinlpModel, op_id: int) -> list[Position]:
    out = []
    for node in model.chains[op_id]:
        entries = len(node.loops) + 1 if node.level > 0 else 1
        for e in range(entries):
            out.append(Position((node.owner, node.level), e))
    return out


def _contains(a: Position, b: Position) -> bool:
    """Position a encloses b (weakly): higher level, or same node and earlier entry."""
    if a.node[1] > b.node[1]:
        return True
    if a.node == b.node:
        return a.entry <= b.entry
    return False


def _charge(levels: int, lo: int, hi: int, bytes_: int) -> tuple[int, ...]:
    return tuple(bytes_ if lo <= l <= hi else 0 for l in range(levels))


def access_candidates(model: MinlpModel, tiles: TileAssignment, op_id: int, buf_name: str,
                      role: str) -> list[Candidate]:
    """Legal placement chains for one access: active at level 0, optional single
    mid copy per intermediate level, pinned home at the top."""
    ttg = model.ttg
    buf = ttg.buffer(buf_name)
    top = model.top
    n_levels = ttg.num_levels
    root_owner = model.chains[op_id][0].owner

    home_pos = Position((model.chains[op_id][0].owner, top), 0)
    home_size = buffer_size(model, tiles, op_id, buf, home_pos)
    home = PlacementRec(op_id, buf_name, home_pos, top, "home", home_size, 1)

    raw = []
    seen: set[tuple] = set()
    for pos in _positions(model, op_id):
        size = buffer_size(model, tiles, op_id, buf, pos)
        v = visits(model, tiles, op_id, pos)
        sig = (size, v, pos.node[1])
        if sig in seen:
            continue
        seen.add(sig)
        raw.append((pos, size, v))

    out: list[Candidate] = []
    for active_pos, a_size, a_visits in raw:
        active = PlacementRec(op_id, buf_name, active_pos, 0, role, a_size, a_visits)
        # No mid copies: refill straight from the home.
        traffic = _charge(n_levels, 0, top, a_size * a_visits)
        occ = tuple(
            (a_size if l == 0 else 0) + (home_size if l == top else 0) for l in range(n_levels)
        )
        out.append(Candidate((home, active), traffic, occ, root_owner))
        # One mid copy at each intermediate storage level.
        for mid_sl in range(1, top):
            for mid_pos, m_size, m_visits in raw:
                if mid_pos.node[1] < mid_sl:
                    continue
                if not (_contains(mid_pos, active_pos) and (mid_pos, mid_sl) != (active_pos, 0)):
                    continue
                if m_size < a_size:
                    continue
                mid = PlacementRec(op_id, buf_name, mid_pos, mid_sl, role, m_size, m_visits)
                traffic = tuple(
                    x + y
                    for x, y in zip(
                        _charge(n_levels, 0, mid_sl, a_size * a_visits),
                        _charge(n_levels, mid_sl, top, m_size * m_visits),
                    )
                )
                occ = tuple(
                    (a_size if l == 0 else 0)
                    + (m_size if l == mid_sl else 0)
                    + (home_size if l == top else 0)
                    for l in range(n_levels)
                )
                out.append(Candidate((home, mid, active), traffic, occ, root_owner))
    return _prune_dominated(out)


def fused_candidates(model: MinlpModel, tiles: TileAssignment, buf_name: str) -> list[Candidate]:
    """Shared placements at the fusion scope, stored at level 0, no outer copy."""
    scope, producer = model.fused[buf_name]
    buf = model.ttg.buffer(buf_name)
    n_levels = model.ttg.num_levels
    root_owner = model.chains[producer][0].owner
    out = []
    seen: set[tuple] = set()
    for e in range(len(scope.loops) + 1):
        pos = Position((scope.owner, scope.level), e)
        size = buffer_size(model, tiles, producer, buf, pos)
        v = visits(model, tiles, producer, pos)
        if (size, v) in seen:
            continue
        seen.add((size, v))
        rec = PlacementRec(None, buf_name, pos, 0, "fused", size, v)
        traffic = _charge(n_levels, 0, 0, size * v)
        occ = tuple(size if l == 0 else 0 for l in range(n_levels))
        out.append(Candidate((rec,), traffic, occ, root_owner))
    return _prune_dominated(out)


def _cand_key(c: Candidate) -> tuple:
    return (
        sum(c.traffic_bytes),
        c.occupancy,
        tuple((p.sl, p.position.node, p.position.entry) for p in c.placements),
    )


def _prune_dominated(cands: list[Candidate]) -> list[Candidate]:
    """Deterministic order, duplicates dropped; cheapest traffic first so the
    placement branch-and-bound meets its bound immediately when capacity is loose."""
    seen: set[tuple] = set()
    kept: list[Candidate] = []
    for c in sorted(cands, key=_cand_key):
        sig = (c.traffic_bytes, c.occupancy)
        if sig in seen:
            continue
        seen.add(sig)
        kept.append(c)
    return kept


# ---------------------------------------------------------------------------
# Solve


def _t_mem(hw: HardwareSpec, traffic: Sequence[int]) -> float:
    return sum(b / lvl.bandwidth for b, lvl in zip(traffic, hw.levels))


def _capacity_ok(model: MinlpModel, chosen: Sequence[Candidate]) -> bool:
    n_levels = model.ttg.num_levels
    top = model.top
    total_top = sum(c.occupancy[top] for c in chosen)
    if total_top > model.hw.levels[top].capacity:
        return False
    groups: dict[int, list[Candidate]] = {}
    for c in chosen:
        groups.setdefault(c.root_owner, []).append(c)
    for members in groups.values():
        for l in range(top):
            if sum(c.occupancy[l] for c in members) > model.hw.levels[l].capacity:
                return False
    return True


def _chain_signature(model: MinlpModel, tiles: TileAssignment, op_id: int) -> tuple:
    """Tile values along the op's chain: candidate profiles depend only on these."""
    sig = []
    for node in model.chains[op_id]:
        for dim in node.loops:
            sig.append(tiles.get((node.owner, node.level, dim), 1))
    return tuple(sig)


def solve(model: MinlpModel, max_candidates: int = 1_000_000,
          timeout: float = 300.0, untiled_reductions: bool = False) -> MinlpSolution:
    """Exact optimum over divisor tile sizes and legal placements.

    Exhaustive over tile assignments with branch-and-bound over placement
    choices per assignment; deterministic tie-breaking by enumeration order.
    Candidate lists are memoized on each access's own chain tiles, and an
    assignment is skipped when even its unconstrained placement optimum
    cannot beat the incumbent.
    """
    assignments = tile_assignments(model, untiled_reductions)
    best: Optional[MinlpSolution] = None
    deadline = time.monotonic() + timeout
    examined = 0
    exhausted = True
    cand_memo: dict[tuple, list[Candidate]] = {}

    def candidates_for(tiles: TileAssignment) -> Optional[list[list[Candidate]]]:
        sets: list[list[Candidate]] = []
        for b in sorted(model.fused):
            key = ("fused", b, _chain_signature(model, tiles, model.fused[b][1]))
            if key not in cand_memo:
                cand_memo[key] = fused_candidates(model, tiles, b)
            if not cand_memo[key]:
                return None
            sets.append(cand_memo[key])
        for op_id, b, role in model.accesses:
            key = (op_id, b, role, _chain_signature(model, tiles, op_id))
            if key not in cand_memo:
                cand_memo[key] = access_candidates(model, tiles, op_id, b, role)
            if not cand_memo[key]:
                return None
            sets.append(cand_memo[key])
        return sets

    for tiles in assignments:
        if examined >= max_candidates or time.monotonic() > deadline:
            exhausted = False
            break
        examined += 1
        comp = t_comp(model, tiles)
        if best is not None and comp >= best.objective:
            continue  # max(T_mem, T_comp) >= T_comp: cannot beat the incumbent
        cand_sets = candidates_for(tiles)
        if cand_sets is None:
            continue
        # The unconstrained per-access optimum bounds the constrained one below.
        unconstrained = sum(
            min(_t_mem(model.hw, c.traffic_bytes) for c in s) for s in cand_sets
        )
        if best is not None and max(comp, unconstrained) >= best.objective:
            continue

        pick = _best_placements(model, cand_sets, best.objective if best else math.inf)
        if pick is None:
            continue
        chosen, mem = pick
        objective = max(mem, comp)
        if best is None or objective < best.objective - 1e-18:
            placements = [p for c in chosen for p in c.placements]
            best = MinlpSolution(dict(tiles), placements, comp, mem, objective, True)

    if best is None:
        raise Infeasible("no tile/placement assignment satisfies the capacities")
    best.optimal = exhausted
    return best


def _best_placements(model: MinlpModel, cand_sets: list[list[Candidate]],
                     cutoff: float) -> Optional[tuple[list[Candidate], float]]:
    """Min-total-T_mem choice of one candidate per access under capacities."""
    hw = model.hw
    mins = [min(_t_mem(hw, c.traffic_bytes) for c in opts) for opts in cand_sets]
    suffix_min = [0.0] * (len(cand_sets) + 1)
    for i in range(len(cand_sets) - 1, -1, -1):
        suffix_min[i] = suffix_min[i + 1] + mins[i]

    best_chosen: Optional[list[Candidate]] = None
    best_mem = math.inf

    def recurse(i: int, chosen: list[Candidate], mem: float) -> None:
        nonlocal best_chosen, best_mem
        if mem + suffix_min[i] >= min(best_mem, cutoff):
            return
        if i == len(cand_sets):
            if _capacity_ok(model, chosen):
                best_mem = mem
                best_chosen = list(chosen)
            return
        for c in cand_sets[i]:
            chosen.append(c)
            recurse(i + 1, chosen, mem + _t_mem(hw, c.traffic_bytes))
            chosen.pop()

    recurse(0, [], 0.0)
    if best_chosen is None:
        return None
    return best_chosen, best_mem


# ---------------------------------------------------------------------------
# Independent constraint checker (recomputes everything from the raw assignment)


def verify_solution(ttg: TieredTileGraph, hw: HardwareSpec, ukm: UKernelModel,
                    sol: MinlpSolution) -> list[str]:
    """Re-verify domain cover, I/O homes, active buffers, storage uniqueness,
    fusion reuse, capacities, and the objective, sharing no code with solve()."""
    errors: list[str] = []
    top = ttg.num_levels - 1

    def chain_nodes(op_id: int) -> list[TileNode]:
        # Walk down from the root owning the op.
        for root in ttg.roots:
            path: list[TileNode] = []

            def dig(node: TileNode) -> bool:
                path.append(node)
                if node.level == 0 and node.owner == op_id:
                    return True
                for ch in node.children:
                    if dig(ch):
                        return True
                path.pop()
                return False

            if dig(root):
                return path
        raise MinlpError(f"op {op_id} missing")

    # (1) Domain cover: per op and dim, tile product equals the extent.
    for op in ttg.ops:
        nodes = chain_nodes(op.op_id)
        for dim in op.dims:
            prod = 1
            for node in nodes:
                if dim in node.loops:
                    t = sol.tiles.get((node.owner, node.level, dim), 1)
                    if t < 1:
                        errors.append(f"op {op.op_id}: non-positive tile for {dim}")
                    prod *= t
            if prod != ttg.extent(dim):
                errors.append(
                    f"op {op.op_id} dim {dim}: tiles multiply to {prod}, extent {ttg.extent(dim)}"
                )

    def recompute_extent(op_id: int, pos: Position, dim: str) -> int:
        nodes = chain_nodes(op_id)
        ext = 1
        for node in nodes:
            t = sol.tiles.get((node.owner, node.level, dim), 1)
            if node.level < pos.node[1] and dim in node.loops:
                ext *= t
            elif (node.owner, node.level) == pos.node:
                for i, loop in enumerate(node.loops):
                    if i >= pos.entry and loop == dim:
                        ext *= t
        return ext

    def recompute_visits(op_id: int, pos: Position) -> int:
        nodes = chain_nodes(op_id)
        v = 1
        for node in nodes:
            if node.level > pos.node[1]:
                for loop in node.loops:
                    v *= sol.tiles.get((node.owner, node.level, loop), 1)
            elif (node.owner, node.level) == pos.node:
                for i, loop in enumerate(node.loops):
                    if i < pos.entry:
                        v *= sol.tiles.get((node.owner, node.level, loop), 1)
        return v

    by_access: dict[tuple[Optional[int], str], list[PlacementRec]] = {}
    for p in sol.placements:
        by_access.setdefault((p.op_id, p.buffer), []).append(p)
        if p.sl > p.position.node[1] and not (p.role == "home"):
            errors.append(f"{p.buffer}: storage level {p.sl} above creation level")

    # (2) I/O buffers reside in the outermost memory; (3) active buffer at level 0.
    for op in ttg.ops:
        for b, role in [(b, "read") for b in op.reads] + [(b, "write") for b in op.writes]:
            buf = ttg.buffer(b)
            recs = by_access.get((op.op_id, b), []) + by_access.get((None, b), [])
            if not recs:
                errors.append(f"op {op.op_id} buffer {b}: no placements")
                continue
            if buf.is_io and not any(
                r.sl == top and r.position.node[1] == top and r.position.entry == 0 for r in recs
            ):
                errors.append(f"buffer {b}: I/O not pinned at the outermost level")
            if sum(1 for r in recs if r.sl == 0) != 1:
                errors.append(f"op {op.op_id} buffer {b}: needs exactly one level-0 copy")
            per_level: dict[int, int] = {}
            for r in recs:
                per_level[r.sl] = per_level.get(r.sl, 0) + 1
            if any(v > 1 for v in per_level.values()):
                errors.append(f"op {op.op_id} buffer {b}: multiple copies at one level")

    # (4) Fusion reuse: shared placements sit at the fusion scope and inner levels only.
    shared = [p for p in sol.placements if p.role == "fused"]
    for p in shared:
        if p.sl > p.position.node[1]:
            errors.append(f"fused buffer {p.buffer}: stored above its creation level")
        if p.position.node[1] >= ttg.num_levels:
            errors.append(f"fused buffer {p.buffer}: bad creation level")

    # (5) Capacity at every level (per top-level subtree below the outermost).
    sizes: dict[tuple[int, int], int] = {}
    for p in sol.placements:
        if p.role == "home":
            owner_root = p.position.node[0]
            sizes[(top, owner_root)] = sizes.get((top, owner_root), 0) + p.size_bytes
            continue
        if p.op_id is not None:
            root_owner = chain_nodes(p.op_id)[0].owner
            buf = ttg.buffer(p.buffer)
            size = buf.elem_bytes
            for d in buf.dims:
                size *= recompute_extent(p.op_id, p.position, d)
        else:
            scope_owner = p.position.node[0]
            root_owner = scope_owner
            for root in ttg.roots:
                if p.position.node[0] in {n.owner for n in _walk_one(root)}:
                    root_owner = root.owner
            size = p.size_bytes
        if size != p.size_bytes:
            errors.append(f"{p.buffer}@{p.position}: recorded size {p.size_bytes} != {size}")
        sizes[(p.sl, root_owner)] = sizes.get((p.sl, root_owner), 0) + p.size_bytes
    top_total = sum(v for (l, _), v in sizes.items() if l == top)
    if top_total > hw.levels[top].capacity:
        errors.append(f"outermost capacity exceeded: {top_total}")
    for (l, owner), v in sizes.items():
        if l < top and v > hw.levels[l].capacity:
            errors.append(f"level {l} capacity exceeded in subtree {owner}: {v}")

    # (6) Objective: recompute T_comp / T_mem from the assignment.
    comp = 0.0
    for op in ttg.ops:
        inv = 1
        for node in chain_nodes(op.op_id):
            for loop in node.loops:
                inv *= sol.tiles.get((node.owner, node.level, loop), 1)
        comp += ukernel_time(op.kind, op.unit, op.flops_per_point, ukm) * inv
    traffic = [0] * ttg.num_levels
    for key, recs in by_access.items():
        ordered = sorted((r for r in recs if r.role != "home"), key=lambda r: -r.sl)
        homes = [r for r in recs if r.role == "home"]
        outer_sl = top if homes else None
        for r in ordered:
            v = recompute_visits(r.op_id, r.position) if r.op_id is not None else r.visits
            hi = outer_sl if outer_sl is not None else r.sl
            for l in range(r.sl, hi + 1):
                traffic[l] += r.size_bytes * v
            outer_sl = r.sl
    mem = sum(b / lvl.bandwidth for b, lvl in zip(traffic, hw.levels))
    if abs(comp - sol.t_comp) > 1e-9 * max(1.0, abs(comp)):
        errors.append(f"T_comp mismatch: {comp} vs {sol.t_comp}")
    if abs(mem - sol.t_mem) > 1e-9 * max(1.0, abs(mem)):
        errors.append(f"T_mem mismatch: {mem} vs {sol.t_mem}")
    if abs(max(comp, mem) - sol.objective) > 1e-9 * max(1.0, sol.objective):
        errors.append(f"objective mismatch: {max(comp, mem)} vs {sol.objective}")
    return errors


def _walk_one(root: TileNode):
    stack = [root]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(n.children)


# ---------------------------------------------------------------------------
# Reporting


def solution_report(ttg: TieredTileGraph, sol: MinlpSolution) -> str:
    lines = ["tile sizes:"]
    for (owner, level, dim), t in sorted(sol.tiles.items()):
        lines.append(f"  level {level} op {owner} loop {dim}: {t}")
    lines.append("placements (buffer, creation, entry, storage):")
    for p in sol.placements:
        lines.append(
            f"  {p.buffer} op={p.op_id} create=L{p.position.node[1]} e={p.position.entry} "
            f"store=L{p.sl} size={p.size_bytes}B visits={p.visits} [{p.role}]"
        )
    lines.append(f"T_comp = {sol.t_comp:.3e} s")
    lines.append(f"T_mem  = {sol.t_mem:.3e} s")
    lines.append(f"objective = {sol.objective:.3e} s ({'optimal' if sol.optimal else 'best-found'})")
    return "\n".join(lines)


def solution_to_json(sol: MinlpSolution) -> dict:
    return {
        "tiles": [
            {"op": o, "level": l, "loop": d, "tile": t} for (o, l, d), t in sorted(sol.tiles.items())
        ],
        "placements": [
            {
                "buffer": p.buffer,
                "op": p.op_id,
                "creation_level": p.position.node[1],
                "entry": p.position.entry,
                "storage_level": p.sl,
                "role": p.role,
                "size_bytes": p.size_bytes,
                "visits": p.visits,
            }
            for p in sol.placements
        ],
        "t_comp": sol.t_comp,
        "t_mem": sol.t_mem,
        "objective": sol.objective,
        "optimal": sol.optimal,
    }


def canonical_solution(model: MinlpModel, level1_tiles: dict[str, int]) -> MinlpSolution:
    """Solution with explicit level-1 tile sizes and the plain placement scheme
    (pinned homes, active copies at level-1 entry 0).  For fixed-structure
    comparisons such as contrasting tile configurations on one kernel."""
    if model.ttg.num_levels != 3:
        raise MinlpError("canonical_solution expects a 3-level hierarchy")
    tiles: TileAssignment = {}
    for op in model.ttg.ops:
        for node in model.chains[op.op_id]:
            for dim in node.loops:
                full = model.ttg.extent(dim)
                t1 = level1_tiles.get(dim, 1)
                if full % t1 != 0:
                    raise MinlpError(f"tile {t1} does not divide {dim}={full}")
                if node.level == 1:
                    tiles[(node.owner, node.level, dim)] = t1
                elif node.level == 2:
                    tiles[(node.owner, node.level, dim)] = full // t1
                else:
                    tiles[(node.owner, node.level, dim)] = 1
    placements: list[PlacementRec] = []
    for op_id, b, role in model.accesses:
        buf = model.ttg.buffer(b)
        home_pos = Position((model.chains[op_id][0].owner, model.top), 0)
        placements.append(
            PlacementRec(op_id, b, home_pos, model.top, "home",
                         buffer_size(model, tiles, op_id, buf, home_pos), 1)
        )
        leaf = model.chains[op_id][-2]  # level-1 node of the op's chain
        pos = Position((leaf.owner, leaf.level), 0)
        placements.append(
            PlacementRec(op_id, b, pos, 0, role,
                         buffer_size(model, tiles, op_id, buf, pos),
                         visits(model, tiles, op_id, pos))
        )
    for bname in sorted(model.fused):
        scope, producer = model.fused[bname]
        buf = model.ttg.buffer(bname)
        pos = Position((scope.owner, scope.level), len(scope.loops))
        placements.append(
            PlacementRec(None, bname, pos, 0, "fused",
                         buffer_size(model, tiles, producer, buf, pos),
                         visits(model, tiles, producer, pos))
        )
    traffic = [0] * model.ttg.num_levels
    by_access: dict[tuple, list[PlacementRec]] = {}
    for p in placements:
        by_access.setdefault((p.op_id, p.buffer), []).append(p)
    for recs in by_access.values():
        ordered = sorted((r for r in recs if r.role != "home"), key=lambda r: -r.sl)
        outer = model.top if any(r.role == "home" for r in recs) else None
        for r in ordered:
            hi = outer if outer is not None else r.sl
            for l in range(r.sl, hi + 1):
                traffic[l] += r.size_bytes * r.visits
            outer = r.sl
    mem = _t_mem(model.hw, traffic)
    comp = t_comp(model, tiles)
    return MinlpSolution(tiles, placements, comp, mem, max(mem, comp), False)
