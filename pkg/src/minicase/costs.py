"""Cost models: Roofline operator cost, alpha-beta collectives, microkernel time."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ir
from .ir import TensorType


class CostError(Exception):
    pass


class UnknownUnit(CostError):
    pass


class MissingEntry(CostError):
    pass


@dataclass(frozen=True)
class MemLevel:
    capacity: int  # bytes
    bandwidth: float  # bytes/second


@dataclass(frozen=True)
class HardwareSpec:
    """Memory hierarchy (inner -> outer), per-unit peaks, and comm constants."""

    levels: tuple[MemLevel, ...]
    peak_flops: dict[str, float]  # unit in {scalar, vector, tensor} -> flops/s
    alpha: float  # seconds latency per collective
    beta: float  # seconds per wire byte
    device_count: int = 1
    mesh: tuple[int, ...] | None = None  # default logical topology dims

    def __post_init__(self) -> None:
        caps = [l.capacity for l in self.levels]
        bws = [l.bandwidth for l in self.levels]
        if any(c2 <= c1 for c1, c2 in zip(caps, caps[1:])):
            raise CostError(f"capacities must strictly increase inner->outer: {caps}")
        if any(b2 > b1 for b1, b2 in zip(bws, bws[1:])):
            raise CostError(f"bandwidths must not increase inner->outer: {bws}")
        if any(v <= 0 for v in list(self.peak_flops.values()) + bws) or self.beta <= 0:
            raise CostError("rates must be positive")

    @property
    def outer_bandwidth(self) -> float:
        return self.levels[-1].bandwidth

    def to_json(self) -> dict:
        doc = {
            "levels": [{"capacity": l.capacity, "bandwidth": l.bandwidth} for l in self.levels],
            "peak_flops": dict(self.peak_flops),
            "comm": {"alpha": self.alpha, "beta": self.beta},
            "device_count": self.device_count,
        }
        if self.mesh is not None:
            doc["mesh"] = list(self.mesh)
        return doc

    @staticmethod
    def from_json(doc: dict) -> "HardwareSpec":
        return HardwareSpec(
            levels=tuple(MemLevel(l["capacity"], l["bandwidth"]) for l in doc["levels"]),
            peak_flops={k: float(v) for k, v in doc["peak_flops"].items()},
            alpha=float(doc["comm"]["alpha"]),
            beta=float(doc["comm"]["beta"]),
            device_count=int(doc.get("device_count", 1)),
            mesh=tuple(doc["mesh"]) if "mesh" in doc else None,
        )


def desk_machine() -> HardwareSpec:
    """Bundled synthetic desk machine: L1 32 KiB / L2 1 MiB / DRAM, 4 devices."""
    return HardwareSpec(
        levels=(
            MemLevel(32 * 1024, 400e9),
            MemLevel(1024 * 1024, 200e9),
            MemLevel(8 * 1024 ** 3, 50e9),
        ),
        peak_flops={"scalar": 8e9, "vector": 64e9, "tensor": 256e9},
        alpha=1e-6,
        beta=1e-9,
        device_count=4,
        mesh=(2, 2),
    )


def load_hw(path: str) -> HardwareSpec:
    with open(path) as f:
        return HardwareSpec.from_json(json.load(f))


def save_hw(hw: HardwareSpec, path: str) -> None:
    with open(path, "w") as f:
        json.dump(hw.to_json(), f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Roofline operator cost


def op_unit(op: ir.Op, out_type: TensorType) -> str:
    """Compute-unit class: tensor for 2-D-lane matmul, vector for other packed ops."""
    if isinstance(op, ir.MatMul) and len(out_type.lanes) == 2:
        return "tensor"
    if out_type.lanes:
        return "vector"
    return "scalar"


def op_flops(op: ir.Op, in_types: Sequence[TensorType], out_type: TensorType) -> int:
    if isinstance(op, ir.MatMul):
        # 2 * batch * M * N * K over logical dims; K is A's logical last dim.
        return 2 * out_type.elem_count * _logical_last_dim(in_types[0])
    if isinstance(op, (ir.Unary, ir.Binary)):
        return out_type.elem_count
    return 0  # Transpose/Pack/Unpack/Reshape/Slice move data only


def _logical_last_dim(t: TensorType) -> int:
    d = t.shape[-1]
    if len(t.lanes) == 1:
        d *= t.lanes[0]
    elif len(t.lanes) == 2:
        d *= t.lanes[1]
    return d


def roofline_cost(op: ir.Op, in_types: Sequence[TensorType], out_type: TensorType,
                  hw: HardwareSpec) -> float:
    """max(compute time at unit peak, traffic time at outermost bandwidth)."""
    if isinstance(op, ir.Boxing):
        raise CostError("boxing is costed by the communication model")
    unit = op_unit(op, out_type)
    if unit not in hw.peak_flops:
        raise UnknownUnit(f"no peak for unit {unit!r}")
    flops = op_flops(op, in_types, out_type)
    moved = sum(t.byte_size for t in in_types) + out_type.byte_size
    return max(flops / hw.peak_flops[unit], moved / hw.outer_bandwidth)


# ---------------------------------------------------------------------------
# Alpha-beta collectives

COLLECTIVES = ("AllReduce", "AllGather", "Scatter", "SliceLocal", "AllToAll")


def wire_bytes(kind: str, payload_bytes: int, participants: int) -> int:
    """Bytes on the wire for one collective (ring formulas for reduce/gather)."""
    if kind not in COLLECTIVES:
        raise CostError(f"unknown collective {kind!r}")
    if kind == "SliceLocal" or participants <= 1:
        return 0
    if kind in ("AllReduce", "AllGather"):
        return int(payload_bytes * (participants - 1) / participants)
    return int(payload_bytes)


def comm_cost(kind: str, payload_bytes: int, participants: int, hw: HardwareSpec) -> float:
    if participants < 1:
        raise CostError("participants must be >= 1")
    if kind == "SliceLocal":
        return 0.0
    return hw.alpha + hw.beta * wire_bytes(kind, payload_bytes, participants)


# ---------------------------------------------------------------------------
# Microkernel linear time model


@dataclass
class UKernelModel:
    """Per (op kind, unit) linear time model: base + per_element * work."""

    entries: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)

    def set(self, kind: str, unit: str, base: float, per_element: float) -> None:
        if base < 0 or per_element <= 0:
            raise CostError("base must be >= 0 and per_element > 0")
        self.entries[(kind, unit)] = (base, per_element)

    def get(self, kind: str, unit: str) -> tuple[float, float]:
        if (kind, unit) not in self.entries:
            raise MissingEntry(f"no ukernel entry for ({kind}, {unit})")
        return self.entries[(kind, unit)]


def ukernel_time(kind: str, unit: str, tile_elems: int, model: UKernelModel) -> float:
    base, per_element = model.get(kind, unit)
    return base + per_element * tile_elems


OP_KIND_NAMES = ("matmul", "unary", "binary", "transpose", "pack", "unpack")


def default_ukernel_model(hw: HardwareSpec) -> UKernelModel:
    """Flop-proportional defaults: zero base, per-work-element time at unit peak."""
    m = UKernelModel()
    for kind in OP_KIND_NAMES:
        for unit, peak in hw.peak_flops.items():
            m.set(kind, unit, 0.0, 1.0 / peak)
    return m


def op_kind_name(op: ir.Op) -> str:
    if isinstance(op, ir.MatMul):
        return "matmul"
    if isinstance(op, ir.Unary):
        return "unary"
    if isinstance(op, ir.Binary):
        return "binary"
    if isinstance(op, ir.Transpose):
        return "transpose"
    if isinstance(op, ir.Pack):
        return "pack"
    if isinstance(op, ir.Unpack):
        return "unpack"
    return type(op).__name__.lower()


def calibrate(rows: Sequence[tuple[str, str, int, float]]) -> UKernelModel:
    """Least-squares fit of (base, per_element) from (kind, unit, elems, seconds) rows."""
    groups: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for kind, unit, elems, seconds in rows:
        groups.setdefault((kind, unit), []).append((int(elems), float(seconds)))
    model = UKernelModel()
    for key, pts in groups.items():
        if len(pts) < 2:
            raise CostError(f"need >= 2 samples to fit {key}")
        x = np.array([[1.0, e] for e, _ in pts])
        y = np.array([s for _, s in pts])
        (base, per_elem), *_ = np.linalg.lstsq(x, y, rcond=None)
        model.set(key[0], key[1], max(0.0, float(base)), max(1e-18, float(per_elem)))
    return model


def load_calibration_csv(path: str) -> list[tuple[str, str, int, float]]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("kind,"):
                continue
            kind, unit, elems, seconds = line.split(",")
            rows.append((kind, unit, int(elems), float(seconds)))
    return rows
