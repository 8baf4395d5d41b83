"""Distributed tensor state: SBP primitives, device placement, ND-SBP vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .ir import TensorType


class Sbp:
    pass


@dataclass(frozen=True)
class Split(Sbp):
    axis: int

    def __repr__(self) -> str:
        return f"S({self.axis})"


@dataclass(frozen=True)
class Broadcast(Sbp):
    def __repr__(self) -> str:
        return "B"


@dataclass(frozen=True)
class Partial(Sbp):
    def __repr__(self) -> str:
        return "P"


B = Broadcast()
P = Partial()


def S(axis: int) -> Split:
    return Split(axis)


def sbp_to_json(s: Sbp) -> str:
    return repr(s)


def sbp_from_json(text: str):
    if text == "B":
        return B
    if text == "P":
        return P
    if text.startswith("S(") and text.endswith(")"):
        return Split(int(text[2:-1]))
    raise ValueError(f"bad sbp {text!r}")


@dataclass(frozen=True)
class Placement:
    """Logical device mesh; product of dims is the participating device count."""

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.dims or any(d < 1 for d in self.dims):
            raise ValueError(f"bad placement dims {self.dims}")

    @property
    def device_count(self) -> int:
        return math.prod(self.dims)

    def coords(self, device: int) -> tuple[int, ...]:
        out = []
        for d in reversed(self.dims):
            out.append(device % d)
            device //= d
        return tuple(reversed(out))


@dataclass(frozen=True)
class NdSbp:
    """One SBP entry per placement dim; entries act orthogonally."""

    entries: tuple[Sbp, ...]

    def __repr__(self) -> str:
        return "[" + ",".join(repr(e) for e in self.entries) + "]"

    def to_json(self) -> list[str]:
        return [sbp_to_json(e) for e in self.entries]

    @staticmethod
    def from_json(items: list[str]) -> "NdSbp":
        return NdSbp(tuple(sbp_from_json(i) for i in items))


def all_broadcast(n_dims: int) -> NdSbp:
    return NdSbp((B,) * n_dims)


@dataclass(frozen=True)
class DistributedType:
    logical: TensorType
    placement: Placement
    ndsbp: NdSbp

    def __post_init__(self) -> None:
        if len(self.ndsbp.entries) != len(self.placement.dims):
            raise ValueError(f"ndsbp {self.ndsbp} rank != placement {self.placement.dims}")
        self.shard_shape()  # raises when a Split axis is not divisible

    def shard_shape(self) -> tuple[int, ...]:
        shape = list(self.logical.shape)
        for entry, mesh in zip(self.ndsbp.entries, self.placement.dims):
            if isinstance(entry, Split):
                if entry.axis >= len(shape):
                    raise ValueError(f"split axis {entry.axis} out of range for {self.logical}")
                if shape[entry.axis] % mesh != 0:
                    raise ValueError(
                        f"axis {entry.axis} of {self.logical} not divisible by mesh dim {mesh}"
                    )
                shape[entry.axis] //= mesh
        return tuple(shape)

    def shard_bytes(self) -> int:
        return (
            math.prod(self.shard_shape())
            * math.prod(self.logical.lanes)
            * self.logical.dtype.byte_width
        )

    def __repr__(self) -> str:
        return f"{self.logical}@{list(self.placement.dims)}{self.ndsbp}"

    def to_json(self) -> dict:
        return {
            "dtype": self.logical.dtype.kind,
            "shape": list(self.logical.shape),
            "lanes": list(self.logical.lanes),
            "placement": list(self.placement.dims),
            "ndsbp": self.ndsbp.to_json(),
        }

    @staticmethod
    def from_json(doc: dict) -> "DistributedType":
        from .ir import DataType

        lt = TensorType(DataType(doc["dtype"]), tuple(doc["shape"]), tuple(doc.get("lanes", [])))
        return DistributedType(lt, Placement(tuple(doc["placement"])), NdSbp.from_json(doc["ndsbp"]))
