"""Grouped collective primitives executed deterministically in simulation.

Groups partition the mesh along one mesh dimension: members agree on every
other coordinate.  Reductions fold in ascending member order so results are
bitwise reproducible.  The ledger records communicated elements per
processor; singleton groups communicate nothing and log zero.

Accounting convention: an allreduce costs one slice per processor (the
bandwidth-efficient ring/tree figure), an allgather costs (g-1) slices, and
an alltoall costs (g-1)/g of a slice.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeMismatchAcrossGroup
from .ir import Dimension, Shape, TensorValue
from .layout import Mesh, ProcessorCoord

ALLREDUCE = "allreduce"
ALLGATHER = "allgather"
ALLTOALL = "alltoall"
COLLECTIVE_KINDS = (ALLREDUCE, ALLGATHER, ALLTOALL)


@dataclass(frozen=True)
class Group:
    """Processors differing only in `mesh_dim`, ordered by that coordinate."""

    mesh_dim: str
    members: tuple[ProcessorCoord, ...]

    @property
    def size(self) -> int:
        return len(self.members)


class CommLedger:
    """Per-processor counters of communicated elements, by collective kind
    and mesh dimension.  Owned by a single executor run."""

    def __init__(self, coords: Iterable[ProcessorCoord]):
        self._counts: dict[ProcessorCoord, dict[tuple[str, str], int]] = {
            tuple(c): {} for c in coords
        }

    def record(self, coord: ProcessorCoord, kind: str, mesh_dim: str, elements: int) -> None:
        if elements < 0:
            raise ValueError("communicated element count cannot be negative")
        bucket = self._counts[tuple(coord)]
        key = (kind, mesh_dim)
        bucket[key] = bucket.get(key, 0) + elements

    def coords(self) -> list[ProcessorCoord]:
        return list(self._counts)

    def elements(self, coord: ProcessorCoord, kind: str, mesh_dim: str | None = None) -> int:
        bucket = self._counts[tuple(coord)]
        if mesh_dim is not None:
            return bucket.get((kind, mesh_dim), 0)
        return sum(v for (k, _), v in bucket.items() if k == kind)

    def elements_allreduced(self, coord: ProcessorCoord) -> int:
        return self.elements(coord, ALLREDUCE)

    def elements_allgathered(self, coord: ProcessorCoord) -> int:
        return self.elements(coord, ALLGATHER)

    def elements_alltoalled(self, coord: ProcessorCoord) -> int:
        return self.elements(coord, ALLTOALL)

    def per_coord(self, coord: ProcessorCoord) -> dict[tuple[str, str], int]:
        return dict(self._counts[tuple(coord)])

    def total(self, kind: str | None = None) -> int:
        total = 0
        for bucket in self._counts.values():
            for (k, _), v in bucket.items():
                if kind is None or k == kind:
                    total += v
        return total

    def as_dict(self) -> dict:
        """JSON-friendly dump with deterministic key order."""
        out = {}
        for coord in sorted(self._counts):
            bucket = self._counts[coord]
            key = ",".join(str(c) for c in coord)
            out[key] = {
                f"{kind}:{mesh_dim}": n
                for (kind, mesh_dim), n in sorted(bucket.items())
            }
        return out


def groups_for(mesh: Mesh, mesh_dim: str) -> list[Group]:
    """Partition all processor coords into groups along one mesh dimension."""
    axis = mesh.axis(mesh_dim)
    buckets: dict[tuple, list[ProcessorCoord]] = {}
    for coord in mesh.coords():
        key = coord[:axis] + coord[axis + 1:]
        buckets.setdefault(key, []).append(coord)
    groups = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=lambda c: c[axis])
        groups.append(Group(mesh_dim, tuple(members)))
    return groups


def _check_same_shape(group: Group, values: Sequence[TensorValue]) -> Shape:
    if len(values) != group.size:
        raise ShapeMismatchAcrossGroup(
            f"group of {group.size} got {len(values)} values"
        )
    shape = values[0].shape
    for v in values[1:]:
        if v.shape.sizes != shape.sizes:
            raise ShapeMismatchAcrossGroup(
                f"group members have shapes {shape} and {v.shape}"
            )
    return shape


def allreduce(group: Group, values: Sequence[TensorValue], kind: str = "sum",
              ledger: CommLedger | None = None) -> list[TensorValue]:
    """Every member receives the element-wise reduction over all members,
    folded in ascending member order."""
    shape = _check_same_shape(group, values)
    if group.size == 1:
        return [values[0]]
    acc = values[0].array
    for v in values[1:]:
        acc = acc + v.array if kind == "sum" else np.maximum(acc, v.array)
    result = TensorValue(shape, acc)
    if ledger is not None:
        for member in group.members:
            ledger.record(member, ALLREDUCE, group.mesh_dim, shape.element_count())
    return [result] * group.size


def allgather(group: Group, values: Sequence[TensorValue], concat_dim: int,
              ledger: CommLedger | None = None) -> list[TensorValue]:
    """Every member receives all slices concatenated along concat_dim."""
    shape = _check_same_shape(group, values)
    if group.size == 1:
        return [values[0]]
    stacked = np.concatenate([v.array for v in values], axis=concat_dim)
    dims = list(shape.dims)
    dims[concat_dim] = Dimension(dims[concat_dim].name, dims[concat_dim].size * group.size)
    result = TensorValue(Shape(tuple(dims)), stacked)
    if ledger is not None:
        for member in group.members:
            ledger.record(
                member, ALLGATHER, group.mesh_dim,
                (group.size - 1) * shape.element_count(),
            )
    return [result] * group.size


def alltoall(group: Group, values: Sequence[TensorValue], split_dim: int,
             concat_dim: int, ledger: CommLedger | None = None) -> list[TensorValue]:
    """Member i receives the i-th split_dim block of every member's value,
    concatenated along concat_dim in member order."""
    shape = _check_same_shape(group, values)
    g = group.size
    if g == 1:
        return [values[0]]
    if shape.dims[split_dim].size % g != 0:
        raise ShapeMismatchAcrossGroup(
            f"alltoall split dim size {shape.dims[split_dim].size} not divisible by group size {g}"
        )
    blocks = [np.split(v.array, g, axis=split_dim) for v in values]
    results = []
    dims = list(shape.dims)
    dims[split_dim] = Dimension(dims[split_dim].name, dims[split_dim].size // g)
    dims[concat_dim] = Dimension(dims[concat_dim].name, dims[concat_dim].size * g)
    out_shape = Shape(tuple(dims))
    for i in range(g):
        received = np.concatenate([blocks[j][i] for j in range(g)], axis=concat_dim)
        results.append(TensorValue(out_shape, received))
    if ledger is not None:
        cost = shape.element_count() * (g - 1) // g
        for member in group.members:
            ledger.record(member, ALLTOALL, group.mesh_dim, cost)
    return results
