"""Processor meshes and computation layouts.

A mesh is an n-dimensional named array of processors.  A computation layout
is a global partial map from tensor-dimension names to mesh-dimension names;
restricting it to one tensor's dimensions gives that tensor's layout, which
determines the slice each processor holds.  Slices are contiguous blocks and
split dimension sizes must be divisible by their mesh dimension's size.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CoordOutOfRange, IllegalLayout, ReplicaDivergence
from .ir import Dimension, Graph, Shape, TensorValue

ProcessorCoord = tuple  # one int per mesh dimension

REPLICA_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Mesh:
    """An ordered sequence of named mesh dimensions; a naming abstraction only."""

    dims: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [n for n, _ in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate mesh dimension names in {names}")
        for n, s in self.dims:
            if s < 1:
                raise ValueError(f"mesh dimension {n!r} must have size >= 1")

    @staticmethod
    def of(pairs: Sequence[tuple[str, int]]) -> "Mesh":
        return Mesh(tuple((n, int(s)) for n, s in pairs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    def has(self, name: str) -> bool:
        return name in self.names

    def axis(self, name: str) -> int:
        return self.names.index(name)

    def dim_size(self, name: str) -> int:
        return self.dims[self.axis(name)][1]

    def processor_count(self) -> int:
        n = 1
        for _, s in self.dims:
            n *= s
        return n

    def coords(self) -> list[ProcessorCoord]:
        """All processor coordinates in row-major order."""
        return list(itertools.product(*(range(s) for _, s in self.dims)))

    def check_coord(self, coord: ProcessorCoord) -> None:
        if len(coord) != self.rank or any(
            not (0 <= c < s) for c, (_, s) in zip(coord, self.dims)
        ):
            raise CoordOutOfRange(f"coordinate {coord} outside mesh {self.dims}")


@dataclass(frozen=True)
class ComputationLayout:
    """Global partial map tensor-dim name -> mesh-dim name.

    Equality is set-based: rules are normalized to lexicographic order.
    """

    rules: tuple[tuple[str, str], ...]

    def __post_init__(self):
        tensor_dims = [t for t, _ in self.rules]
        if len(set(tensor_dims)) != len(tensor_dims):
            raise ValueError(f"tensor dimension mapped twice in layout {self.rules}")
        object.__setattr__(self, "rules", tuple(sorted(self.rules)))

    @staticmethod
    def of(pairs: Iterable[tuple[str, str]]) -> "ComputationLayout":
        return ComputationLayout(tuple((t, m) for t, m in pairs))

    def mesh_dim_for(self, tensor_dim: str) -> str | None:
        for t, m in self.rules:
            if t == tensor_dim:
                return m
        return None

    def __str__(self) -> str:
        return "[" + ", ".join(f"{t}->{m}" for t, m in self.rules) + "]"


@dataclass(frozen=True)
class TensorLayout:
    """A computation layout restricted to one shape: position -> mesh dim.

    A legal tensor layout is injective (no mesh dim claimed by two positions);
    restriction itself does not enforce that, validate_layout reports it.
    """

    assignments: tuple[tuple[int, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(sorted(self.assignments)))

    @property
    def mesh_dims(self) -> tuple[str, ...]:
        return tuple(m for _, m in self.assignments)

    def mesh_dim_at(self, position: int) -> str | None:
        for p, m in self.assignments:
            if p == position:
                return m
        return None

    def position_of(self, mesh_dim: str) -> int | None:
        for p, m in self.assignments:
            if m == mesh_dim:
                return p
        return None

    def is_replicated(self) -> bool:
        return not self.assignments


def restrict(layout: ComputationLayout, shape: Shape) -> TensorLayout:
    """Keep exactly the rules whose tensor dim occurs in the shape."""
    return TensorLayout(
        tuple(
            (shape.index(t), m) for t, m in layout.rules if shape.has(t)
        )
    )


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class DoubleSplit:
    tensor_id: str
    mesh_dim: str

    def __str__(self) -> str:
        return f"tensor {self.tensor_id!r}: two dimensions split across mesh dim {self.mesh_dim!r}"


@dataclass(frozen=True)
class NotDivisible:
    tensor_id: str
    dim_name: str
    dim_size: int
    mesh_dim: str
    mesh_size: int

    def __str__(self) -> str:
        return (
            f"tensor {self.tensor_id!r}: dim {self.dim_name!r} of size {self.dim_size} "
            f"not divisible by mesh dim {self.mesh_dim!r} of size {self.mesh_size}"
        )


@dataclass(frozen=True)
class UnknownMeshDim:
    tensor_dim: str
    mesh_dim: str

    def __str__(self) -> str:
        return f"layout maps {self.tensor_dim!r} to unknown mesh dim {self.mesh_dim!r}"


Violation = "DoubleSplit | NotDivisible | UnknownMeshDim"


def validate_layout(graph: Graph, layout: ComputationLayout, mesh: Mesh) -> list:
    """All violations of the layout over every tensor in the graph.

    An empty list means the layout is legal.  Violations are ordinary
    results, not exceptions.
    """
    violations: list = []
    for t, m in layout.rules:
        if not mesh.has(m):
            violations.append(UnknownMeshDim(t, m))
    known = {(t, m) for t, m in layout.rules if mesh.has(m)}
    pruned = ComputationLayout(tuple(known))
    for node in graph.nodes:
        tl = restrict(pruned, node.output_shape)
        seen: dict[str, int] = {}
        for pos, m in tl.assignments:
            if m in seen:
                violations.append(DoubleSplit(node.id, m))
            seen[m] = pos
            dim = node.output_shape.dims[pos]
            msize = mesh.dim_size(m)
            if dim.size % msize != 0:
                violations.append(NotDivisible(node.id, dim.name, dim.size, m, msize))
    return violations


# -- slice arithmetic ---------------------------------------------------------


def slice_shape(shape: Shape, tensor_layout: TensorLayout, mesh: Mesh) -> Shape:
    """The local shape one processor holds: split dims divided by mesh size."""
    dims = list(shape.dims)
    for pos, m in tensor_layout.assignments:
        msize = mesh.dim_size(m)
        if dims[pos].size % msize != 0:
            raise IllegalLayout(
                [NotDivisible("<shape>", dims[pos].name, dims[pos].size, m, msize)]
            )
        dims[pos] = Dimension(dims[pos].name, dims[pos].size // msize)
    return Shape(tuple(dims))


def _slice_ranges(shape: Shape, tensor_layout: TensorLayout, mesh: Mesh,
                  coord: ProcessorCoord) -> tuple[slice, ...]:
    mesh.check_coord(coord)
    ranges = [slice(None)] * shape.rank
    for pos, m in tensor_layout.assignments:
        msize = mesh.dim_size(m)
        block = shape.dims[pos].size // msize
        k = coord[mesh.axis(m)]
        ranges[pos] = slice(k * block, (k + 1) * block)
    return tuple(ranges)


def extract_slice(value: TensorValue, tensor_layout: TensorLayout, mesh: Mesh,
                  coord: ProcessorCoord) -> TensorValue:
    """The contiguous block of `value` owned by the processor at `coord`."""
    local = slice_shape(value.shape, tensor_layout, mesh)
    ranges = _slice_ranges(value.shape, tensor_layout, mesh, coord)
    return TensorValue(local, value.array[ranges])


def assemble(slices: Mapping[ProcessorCoord, TensorValue], tensor_layout: TensorLayout,
             mesh: Mesh, full_shape: Shape) -> TensorValue:
    """Reconstruct the full tensor from per-processor slices.

    Replicated copies (processors whose coords agree on every mesh dim in the
    layout's image) must agree within REPLICA_TOLERANCE relative, else
    ReplicaDivergence is raised: that signals a lowering bug, not user error.
    """
    full = np.zeros(full_shape.sizes)
    written: dict[tuple, np.ndarray] = {}
    for coord in mesh.coords():
        if coord not in slices:
            raise CoordOutOfRange(f"missing slice for processor {coord}")
        ranges = _slice_ranges(full_shape, tensor_layout, mesh, coord)
        arr = slices[coord].array
        expected = slice_shape(full_shape, tensor_layout, mesh)
        if slices[coord].shape.sizes != expected.sizes:
            raise ReplicaDivergence(
                f"slice at {coord} has sizes {slices[coord].shape.sizes}, expected {expected.sizes}"
            )
        key = tuple(
            coord[mesh.axis(m)] for _, m in tensor_layout.assignments
        )
        if key in written:
            prev = written[key]
            denom = np.maximum(np.abs(prev), np.abs(arr))
            diff = np.abs(prev - arr)
            rel = np.where(denom > 0, diff / np.where(denom == 0, 1.0, denom), diff)
            if np.any(rel > REPLICA_TOLERANCE):
                raise ReplicaDivergence(
                    f"replicas disagree at processor {coord}: max relative "
                    f"difference {float(np.max(rel)):.3e}"
                )
        else:
            written[key] = arr
            full[ranges] = arr
    return TensorValue(full_shape, full)


# -- brute-force layout enumeration ------------------------------------------


def enumerate_layouts(graph: Graph, mesh: Mesh) -> list[ComputationLayout]:
    """All legal computation layouts over the graph's dimension names.

    Brute force over partial maps; intended for small instances only.
    Result is deduplicated and ordered lexicographically by rule list.
    """
    names = graph.dim_names()
    options = [None] + list(mesh.names)
    layouts: list[ComputationLayout] = []
    for choice in itertools.product(options, repeat=len(names)):
        rules = tuple(
            (t, m) for t, m in zip(names, choice) if m is not None
        )
        layout = ComputationLayout(rules)
        if not validate_layout(graph, layout, mesh):
            layouts.append(layout)
    layouts.sort(key=lambda l: l.rules)
    return layouts
