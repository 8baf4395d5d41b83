"""Command-line pipeline driver: optimize, distribute, schedule, plan, run, report.

Each stage reads the previous stage's JSON artifact and writes its own plus a
human-readable report.  Exit codes: 0 ok, 2 validation failure, 3 infeasible,
4 internal invariant breach.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ir
from .costs import (
    HardwareSpec,
    calibrate,
    default_ukernel_model,
    desk_machine,
    load_calibration_csv,
    load_hw,
    save_hw,
)
from .egraph import EGraph, Limits, add_graph, saturate
from .extraction import (
    ExtractionProblem,
    Infeasible,
    count_ops,
    extract,
    greedy_extract,
    roofline_cost_fn,
)
from .interp import eval as interp_eval
from .interp import eval_distributed, eval_scheduled
from .memplan import liveness, plan, plan_report, plan_to_json
from .presets import BUNDLED, random_inputs
from .rules import VectorizeConfig, rule_set
from .sbp import Placement
from .tiles import ScheduleState, init_tile_graph
from .mcts import mcts_search

log = logging.getLogger("minicase")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_INTERNAL = 4


class StageFailure(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"{stage}: {message}")
        self.code = code


def _setup_logging() -> None:
    level = os.environ.get("MINICASE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _load_graph(path: str, stage: str) -> ir.Graph:
    try:
        g = ir.load_graph(path)
    except (OSError, KeyError, ValueError, ir.IrError) as e:
        raise StageFailure(stage, f"cannot load graph {path}: {e}", EXIT_VALIDATION)
    problems = ir.validate_graph(g)
    if problems:
        raise StageFailure(stage, "; ".join(problems), EXIT_VALIDATION)
    return g


def _load_hw(path: str | None) -> HardwareSpec:
    return load_hw(path) if path else desk_machine()


def _parse_mesh(text: str) -> Placement:
    dims = tuple(int(p) for p in text.lower().split("x"))
    return Placement(dims)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _lane_config(text: str | None) -> VectorizeConfig | None:
    """Lane options from inline JSON or a config file path."""
    if not text:
        return None
    if not text.lstrip().startswith("["):
        with open(text) as f:
            doc = json.load(f)
        options = doc["lane_options"] if isinstance(doc, dict) else doc
    else:
        options = json.loads(text)
    return VectorizeConfig(tuple(tuple(o) for o in options))


def cmd_optimize(args) -> int:
    g = _load_graph(args.graph, "optimize")
    hw = _load_hw(args.hw)
    out = _out_dir(args)
    names = args.rules.split(",") if args.rules else ["transpose"]
    rules = rule_set(names, _lane_config(args.lanes))

    before_t = count_ops(g, ir.Transpose)
    before_p = count_ops(g, ir.Pack) + count_ops(g, ir.Unpack)

    if args.extract.startswith("greedy:"):
        order = args.extract.split(":", 1)[1].split("+")
        result_graph = greedy_extract(g, order)
        report_lines = [f"greedy order: {order}"]
        total_cost = float("nan")
    else:
        eg = EGraph()
        memo = add_graph(eg, g)
        roots = [memo[o] for o in g.outputs]
        rep = saturate(eg, rules, Limits(args.max_iters, args.max_nodes))
        res = extract(ExtractionProblem(eg, roots, roofline_cost_fn(eg, hw)))
        result_graph = res.graph
        total_cost = res.total_cost
        report_lines = [
            f"saturation: iterations={rep.iterations} nodes={rep.node_count} "
            f"saturated={rep.saturated}",
            f"extraction cost: {total_cost:.6e} s",
        ]
        cost_fn = roofline_cost_fn(eg, hw)
        report_lines.append("per-node costs:")
        for cid, node in sorted(res.selection.items()):
            report_lines.append(f"  class {cid}: {node.op!r} -> {cost_fn(cid, node):.3e} s")

    problems = ir.validate_graph(result_graph)
    if problems:
        raise StageFailure("optimize", f"output graph invalid: {problems}", EXIT_INTERNAL)

    after_t = count_ops(result_graph, ir.Transpose)
    after_p = count_ops(result_graph, ir.Unpack) + count_ops(result_graph, ir.Pack)
    report_lines += [
        f"transpose count: {before_t} -> {after_t}",
        f"pack/unpack count: {before_p} -> {after_p}",
    ]
    ir.save_graph(result_graph, str(out / "optimized.json"))
    _write(out / "optimize_report.txt", "\n".join(report_lines) + "\n")
    print("\n".join(report_lines))
    return EXIT_OK


def cmd_distribute(args) -> int:
    from .distribution import (
        NoStrategy,
        build_dist_egraph,
        extract_strategy,
        memory_check,
    )

    g = _load_graph(args.graph, "distribute")
    hw = _load_hw(args.hw)
    if args.mesh:
        placement = _parse_mesh(args.mesh)
    elif hw.mesh:
        placement = Placement(hw.mesh)
    else:
        raise StageFailure("distribute", "no --mesh given and hardware has none", EXIT_VALIDATION)
    if placement.device_count > hw.device_count:
        raise StageFailure(
            "distribute",
            f"mesh {placement.dims} needs {placement.device_count} devices, "
            f"hardware has {hw.device_count}",
            EXIT_VALIDATION,
        )
    out = _out_dir(args)
    try:
        space = build_dist_egraph(g, placement, hw)
        res = extract_strategy(space, hw, args.memory_limit)
    except NoStrategy as e:
        raise StageFailure("distribute", str(e), EXIT_INFEASIBLE)
    except Infeasible as e:
        raise StageFailure("distribute", str(e), EXIT_INFEASIBLE)

    problems = ir.validate_graph(res.graph)
    if problems:
        raise StageFailure("distribute", f"output invalid: {problems}", EXIT_INTERNAL)
    mem = memory_check(res.graph, placement, hw)
    lines = [
        f"mesh: {list(placement.dims)}",
        f"strategy cost: {res.total_cost:.6e} s",
        "node strategies:",
    ]
    for n in res.graph.nodes:
        state = repr(n.dist.ndsbp) if n.dist else "host"
        lines.append(f"  node {n.id} {type(n.op).__name__}: {state}")
    lines += [
        f"per-device peak bytes: {mem['per_device_peak']}",
        f"cluster sum bytes: {mem['cluster_sum_peak']}",
        f"within capacity: {mem['ok']}",
    ]
    ir.save_graph(res.graph, str(out / "distributed.json"))
    _write(out / "distribute_report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .minlp import Infeasible as MinlpInfeasible
    from .minlp import MinlpError, solution_report, solution_to_json, verify_solution
    from .tiles import ScheduleError

    g = _load_graph(args.graph, "schedule")
    hw = _load_hw(args.hw)
    if args.levels != len(hw.levels):
        raise StageFailure(
            "schedule",
            f"--levels {args.levels} does not match the {len(hw.levels)}-level hardware",
            EXIT_VALIDATION,
        )
    ukm = default_ukernel_model(hw)
    out = _out_dir(args)
    try:
        ttg = init_tile_graph(g, args.levels)
        root = ScheduleState(ttg)
        res = mcts_search(root, args.iters, hw, ukm, seed=args.seed)
    except MinlpInfeasible as e:
        raise StageFailure("schedule", str(e), EXIT_INFEASIBLE)
    except (ScheduleError, MinlpError) as e:
        raise StageFailure("schedule", str(e), EXIT_VALIDATION)
    errors = verify_solution(res.best_state.ttg, hw, ukm, res.best_solution)
    if errors:
        raise StageFailure("schedule", f"checker failed: {errors}", EXIT_INTERNAL)
    lines = [
        "chosen tiered tile graph:",
        res.best_state.ttg.notation(),
        "",
        solution_report(res.best_state.ttg, res.best_solution),
        f"actions: {[repr(a) for a in res.best_state.history]}",
        f"states evaluated: {res.evaluations}",
    ]
    doc = {
        "actions": [repr(a) for a in res.best_state.history],
        "solution": solution_to_json(res.best_solution),
    }
    _write(out / "schedule.json", json.dumps(doc, indent=1, sort_keys=True))
    _write(out / "schedule_report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_plan(args) -> int:
    g = _load_graph(args.graph, "plan")
    out = _out_dir(args)
    buffers = liveness(g)
    mp = plan(buffers, mode=args.mode)
    _write(out / "plan.json", json.dumps(plan_to_json(buffers, mp), indent=1, sort_keys=True))
    report = plan_report(buffers, mp)
    _write(out / "plan_report.txt", report + "\n")
    print(report)
    return EXIT_OK


def _run_through_arena(g: ir.Graph, inputs: dict, plan_doc: dict) -> dict[int, np.ndarray]:
    """Execute with every buffer viewed into one flat arena at planned offsets."""
    from .interp import eval_op

    offsets = {b["id"]: b["offset"] for b in plan_doc["buffers"] if b["offset"] is not None}
    arena = np.zeros(max(plan_doc["footprint"], 4) // 4, dtype=np.float32)
    idx = {n.id: n for n in g.nodes}

    def view(nid: int) -> np.ndarray:
        node = idx[nid]
        off = offsets[nid] // 4
        return arena[off : off + node.type.elem_count].reshape(
            node.type.shape + node.type.lanes
        )

    for nid in ir.topo_order(g):
        node = idx[nid]
        if isinstance(node.op, ir.Input):
            view(nid)[...] = inputs[node.op.name]
            continue
        arg_copies = [view(i).copy() for i in node.inputs]
        in_types = [idx[i].type for i in node.inputs]
        view(nid)[...] = eval_op(node.op, arg_copies, in_types, node.type)
    return {o: view(o).copy() for o in g.outputs}


def cmd_run(args) -> int:
    g = _load_graph(args.graph, "run")
    out = _out_dir(args)
    if args.inputs:
        inputs = {}
        manifest = json.loads((Path(args.inputs) / "manifest.json").read_text())
        for name, meta in manifest.items():
            raw = (Path(args.inputs) / meta["file"]).read_bytes()
            inputs[name] = np.frombuffer(raw, dtype=np.float32).reshape(meta["shape"]).copy()
    else:
        inputs = random_inputs(g, seed=args.seed)

    if args.arena:
        if any(n.dist is not None for n in g.nodes):
            raise StageFailure("run", "--arena applies to logical graphs", EXIT_VALIDATION)
        plan_doc = json.loads(Path(args.arena).read_text())
        outs = _run_through_arena(g, inputs, plan_doc)
        print(f"executed through a {plan_doc['footprint']}-byte arena")
    elif any(n.dist is not None for n in g.nodes):
        placement = next(n.dist.placement for n in g.nodes if n.dist is not None)
        outs, traffic = eval_distributed(g, placement, inputs)
        print(f"traffic bytes by collective: {traffic}")
    else:
        outs = interp_eval(g, inputs)

    manifest = {}
    for nid, arr in outs.items():
        fname = f"out_{nid}.bin"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        manifest[str(nid)] = {"file": fname, "shape": list(arr.shape)}
    _write(out / "outputs.json", json.dumps(manifest, indent=1, sort_keys=True))
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    rows = load_calibration_csv(args.csv)
    model = calibrate(rows)
    doc = {
        f"{kind}/{unit}": {"base": base, "per_element": per}
        for (kind, unit), (base, per) in sorted(model.entries.items())
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        _write(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_examples(args) -> int:
    out = _out_dir(args)
    for name, builder in BUNDLED.items():
        ir.save_graph(builder(), str(out / f"{name}.json"))
    save_hw(desk_machine(), str(out / "hw.json"))
    print(f"wrote {', '.join(sorted(BUNDLED))} and hw.json to {out}")
    return EXIT_OK


REPORT_FILES = (
    ("saturation and extraction", "optimize_report.txt"),
    ("distributed strategy", "distribute_report.txt"),
    ("schedule", "schedule_report.txt"),
    ("memory plan", "plan_report.txt"),
)


def cmd_report(args) -> int:
    """Render every stage report found under the artifact directory."""
    base = Path(args.out)
    if not base.exists():
        raise StageFailure("report", f"no artifact directory {base}", EXIT_VALIDATION)
    sections = []
    for title, fname in REPORT_FILES:
        for path in sorted(base.rglob(fname)):
            rel = path.relative_to(base)
            sections.append(f"== {title} ({rel}) ==\n{path.read_text().rstrip()}")
    if not sections:
        raise StageFailure("report", f"no stage reports under {base}", EXIT_VALIDATION)
    print("\n\n".join(sections))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minicase", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True):
        if graph:
            sp.add_argument("--graph", required=True, help="input graph JSON")
        sp.add_argument("--hw", help="hardware spec JSON (default: bundled desk machine)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="1 forces determinism")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("optimize", help="equality saturation + extraction")
    common(sp)
    sp.add_argument("--rules", default="transpose", help="comma list: transpose,vectorize")
    sp.add_argument("--extract", default="exact", help="exact | greedy:<Rule+Rule+...>")
    sp.add_argument("--lanes", help='lane options JSON, e.g. "[[8],[16,16]]"')
    sp.add_argument("--max-iters", type=int, default=30)
    sp.add_argument("--max-nodes", type=int, default=50_000)
    sp.set_defaults(fn=cmd_optimize)

    sp = sub.add_parser("distribute", help="SBP strategy search over a device mesh")
    common(sp)
    sp.add_argument("--mesh", help="mesh dims, e.g. 2 or 2x2 (default: hardware mesh)")
    sp.add_argument("--memory-limit", type=int, help="per-device byte limit")
    sp.set_defaults(fn=cmd_distribute)

    sp = sub.add_parser("schedule", help="MCTS + parametric tile optimization")
    common(sp)
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--iters", type=int, default=64)
    sp.set_defaults(fn=cmd_schedule)

    sp = sub.add_parser("plan", help="liveness + bin-packing memory plan")
    common(sp)
    sp.add_argument("--mode", default="exact", choices=["exact", "firstfit"])
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("run", help="reference interpretation")
    common(sp)
    sp.add_argument("--inputs", help="directory with manifest.json + raw row-major .bin files")
    sp.add_argument("--arena", help="plan.json: execute through planned offsets in one arena")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("calibrate", help="fit microkernel time model from CSV")
    sp.add_argument("--csv", required=True, help="rows: kind,unit,elems,seconds")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("examples", help="write bundled example graphs")
    sp.add_argument("--out", default="examples_out")
    sp.set_defaults(fn=cmd_examples)

    sp = sub.add_parser("report", help="render all stage reports under a directory")
    sp.add_argument("--out", default="out", help="artifact directory to summarize")
    sp.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # invariant breach
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
