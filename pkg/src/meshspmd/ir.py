"""Named-dimension tensor graphs.

Tensors carry a tuple of (name, size) dimensions instead of bare axis
numbers.  A Graph is a DAG of tensor-producing nodes (inputs, variables,
constants, component-wise ops, einsums, reductions, reshapes) with shapes
inferred at build time.  `reference_execute` evaluates a graph on a single
device with dense float64 semantics and is the oracle the distributed
executor is checked against.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BroadcastIncompatible,
    DimSizeMismatch,
    DuplicateDimName,
    MissingBinding,
    ReshapeCountMismatch,
    ShapeMismatch,
    UnknownNode,
    UnknownOutputDim,
)

ShapeLike = "Shape | Sequence[tuple[str, int]]"


@dataclass(frozen=True)
class Dimension:
    """A named, sized tensor dimension."""

    name: str
    size: int

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"invalid dimension name {self.name!r}")
        if self.size < 1:
            raise ValueError(f"dimension {self.name!r} must have size >= 1, got {self.size}")


@dataclass(frozen=True)
class Shape:
    """An ordered tuple of uniquely named dimensions; () is a scalar."""

    dims: tuple[Dimension, ...]

    def __post_init__(self):
        seen = set()
        for d in self.dims:
            if d.name in seen:
                raise DuplicateDimName(f"dimension {d.name!r} appears twice in shape {self}")
            seen.add(d.name)

    @staticmethod
    def of(pairs: ShapeLike) -> "Shape":
        if isinstance(pairs, Shape):
            return pairs
        return Shape(tuple(Dimension(name, int(size)) for name, size in pairs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    def element_count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d.size
        return n

    def has(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)

    def size_of(self, name: str) -> int:
        return self.dims[self.index(name)].size

    def drop(self, names: Iterable[str]) -> "Shape":
        dropped = set(names)
        return Shape(tuple(d for d in self.dims if d.name not in dropped))

    def pairs(self) -> list[tuple[str, int]]:
        return [(d.name, d.size) for d in self.dims]

    def __str__(self) -> str:
        return "[" + ", ".join(f"{d.name}={d.size}" for d in self.dims) + "]"


SCALAR = Shape(())


@dataclass(frozen=True)
class TensorValue:
    """A dense float64 tensor paired with its named shape.

    The payload is stored as a C-ordered (row-major) ndarray whose axes
    follow the shape's dimension order.
    """

    shape: Shape
    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if arr.size != self.shape.element_count():
            raise ShapeMismatch(
                f"value has {arr.size} elements, shape {self.shape} wants "
                f"{self.shape.element_count()}"
            )
        arr = np.asarray(arr.reshape(self.shape.sizes), order="C")
        object.__setattr__(self, "array", arr)

    @staticmethod
    def of(shape: ShapeLike, data) -> "TensorValue":
        return TensorValue(Shape.of(shape), data)

    @staticmethod
    def zeros(shape: ShapeLike) -> "TensorValue":
        s = Shape.of(shape)
        return TensorValue(s, np.zeros(s.sizes))

    @staticmethod
    def ones(shape: ShapeLike) -> "TensorValue":
        s = Shape.of(shape)
        return TensorValue(s, np.ones(s.sizes))

    @staticmethod
    def scalar(x: float) -> "TensorValue":
        return TensorValue(SCALAR, np.float64(x))

    def flat(self) -> np.ndarray:
        return self.array.reshape(-1)


# Component-wise operations: name -> (arity, numpy implementation).
COMPONENTWISE_OPS: dict[str, tuple[int, object]] = {
    "add": (2, np.add),
    "sub": (2, np.subtract),
    "mul": (2, np.multiply),
    "div": (2, np.true_divide),
    "relu": (1, lambda x: np.maximum(x, 0.0)),
    "step": (1, lambda x: np.heaviside(x, 0.0)),
    "greater_equal": (2, lambda a, b: np.greater_equal(a, b).astype(np.float64)),
    "exp": (1, np.exp),
}

REDUCE_KINDS = ("sum", "max")

KIND_INPUT = "input"
KIND_VARIABLE = "variable"
KIND_CONSTANT = "constant"
KIND_COMPONENTWISE = "componentwise"
KIND_EINSUM = "einsum"
KIND_REDUCE = "reduce"
KIND_RESHAPE = "reshape"


@dataclass(frozen=True)
class NodeSpec:
    """One operation in a graph, with its validated output shape."""

    id: str
    kind: str
    inputs: tuple[str, ...]
    output_shape: Shape
    cw_op: str | None = None
    reduce_dims: tuple[str, ...] = ()
    reduce_kind: str | None = None
    value: TensorValue | None = None  # constants only


def infer_componentwise(op: str, shapes: Sequence[Shape]) -> Shape:
    """Output shape of a component-wise op, with implicit subset broadcasting."""
    if op not in COMPONENTWISE_OPS:
        raise ValueError(f"unknown component-wise op {op!r}")
    arity = COMPONENTWISE_OPS[op][0]
    if len(shapes) != arity:
        raise ValueError(f"op {op!r} expects {arity} inputs, got {len(shapes)}")
    if arity == 1:
        return shapes[0]
    a, b = shapes
    _check_consistent_sizes(list(a.dims) + list(b.dims))
    aset, bset = set(a.names), set(b.names)
    if aset == bset:
        return a
    if bset <= aset:
        return a
    if aset <= bset:
        return b
    raise BroadcastIncompatible(
        f"cannot broadcast {a} with {b}: neither dimension set contains the other"
    )


def infer_reduce(shape: Shape, dims: Sequence[str], kind: str) -> Shape:
    if kind not in REDUCE_KINDS:
        raise ValueError(f"unknown reduction kind {kind!r}")
    if not dims:
        raise ValueError("reduction needs at least one dimension")
    for d in dims:
        if not shape.has(d):
            raise ValueError(f"reduction dim {d!r} not in shape {shape}")
    if len(set(dims)) != len(dims):
        raise DuplicateDimName(f"duplicate reduction dims in {dims}")
    return shape.drop(dims)


def infer_einsum(shapes: Sequence[Shape], output_shape: Shape) -> Shape:
    if not shapes:
        raise ValueError("einsum needs at least one input")
    all_dims = [d for s in shapes for d in s.dims]
    _check_consistent_sizes(all_dims)
    sizes = {d.name: d.size for d in all_dims}
    for d in output_shape.dims:
        if d.name not in sizes:
            raise UnknownOutputDim(
                f"einsum output dim {d.name!r} does not occur in any input"
            )
        if sizes[d.name] != d.size:
            raise DimSizeMismatch(
                f"einsum output dim {d.name!r} declared with size {d.size}, "
                f"inputs have size {sizes[d.name]}"
            )
    return output_shape


def infer_reshape(shape: Shape, output_shape: Shape) -> Shape:
    if shape.element_count() != output_shape.element_count():
        raise ReshapeCountMismatch(
            f"reshape from {shape} ({shape.element_count()} elements) to "
            f"{output_shape} ({output_shape.element_count()} elements)"
        )
    return output_shape


def infer_shape(
    kind: str,
    input_shapes: Sequence[Shape],
    *,
    cw_op: str | None = None,
    reduce_dims: Sequence[str] = (),
    reduce_kind: str | None = None,
    declared_shape: Shape | None = None,
) -> Shape:
    """Dispatch shape inference for any operation kind."""
    if kind == KIND_COMPONENTWISE:
        return infer_componentwise(cw_op, input_shapes)
    if kind == KIND_REDUCE:
        return infer_reduce(input_shapes[0], reduce_dims, reduce_kind)
    if kind == KIND_EINSUM:
        return infer_einsum(input_shapes, declared_shape)
    if kind == KIND_RESHAPE:
        return infer_reshape(input_shapes[0], declared_shape)
    if kind in (KIND_INPUT, KIND_VARIABLE, KIND_CONSTANT):
        return declared_shape
    raise ValueError(f"unknown node kind {kind!r}")


def _check_consistent_sizes(dims: Iterable[Dimension]) -> None:
    sizes: dict[str, int] = {}
    for d in dims:
        if d.name in sizes and sizes[d.name] != d.size:
            raise DimSizeMismatch(
                f"dimension {d.name!r} used with sizes {sizes[d.name]} and {d.size}"
            )
        sizes[d.name] = d.size


class Graph:
    """A DAG of tensor operations, built single-writer and then shared read-only.

    Node ids are unique; insertion order is a topological order.  Dimension
    names are global to the graph: reusing a name with a different size is
    rejected at build time.
    """

    def __init__(self):
        self.nodes: list[NodeSpec] = []
        self.inputs: list[str] = []
        self.variables: list[str] = []
        self._by_id: dict[str, NodeSpec] = {}
        self._dim_sizes: dict[str, int] = {}
        self._auto = 0

    # -- lookup ----------------------------------------------------------

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise UnknownNode(f"no node with id {node_id!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def dim_names(self) -> list[str]:
        """All dimension names used by any node, sorted."""
        return sorted(self._dim_sizes)

    def dim_size(self, name: str) -> int:
        return self._dim_sizes[name]

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes if node_id in n.inputs]

    def ancestors(self, node_ids: Iterable[str]) -> set[str]:
        """The given nodes plus everything they transitively depend on."""
        pending = list(node_ids)
        seen: set[str] = set()
        while pending:
            nid = pending.pop()
            if nid in seen:
                continue
            seen.add(nid)
            pending.extend(self.node(nid).inputs)
        return seen

    def copy(self) -> "Graph":
        g = Graph()
        g.nodes = list(self.nodes)
        g.inputs = list(self.inputs)
        g.variables = list(self.variables)
        g._by_id = dict(self._by_id)
        g._dim_sizes = dict(self._dim_sizes)
        g._auto = self._auto
        return g

    # -- construction ----------------------------------------------------

    def _fresh_id(self) -> str:
        while True:
            nid = f"n{self._auto}"
            self._auto += 1
            if nid not in self._by_id:
                return nid

    def fresh_dim_name(self, base: str) -> str:
        """A dimension name not yet used anywhere in the graph."""
        i = 0
        while True:
            name = f"{base}_{i}"
            if name not in self._dim_sizes:
                return name
            i += 1

    def _append(self, node: NodeSpec) -> str:
        if node.id in self._by_id:
            raise ValueError(f"duplicate node id {node.id!r}")
        for inp in node.inputs:
            if inp not in self._by_id:
                raise UnknownNode(f"node {node.id!r} references unknown input {inp!r}")
        _check_consistent_sizes(
            [Dimension(n, s) for n, s in self._dim_sizes.items()] + list(node.output_shape.dims)
        )
        for d in node.output_shape.dims:
            self._dim_sizes[d.name] = d.size
        self.nodes.append(node)
        self._by_id[node.id] = node
        return node.id

    def add_input(self, shape: ShapeLike, id: str | None = None) -> str:
        nid = id or self._fresh_id()
        self._append(NodeSpec(nid, KIND_INPUT, (), Shape.of(shape)))
        self.inputs.append(nid)
        return nid

    def add_variable(self, shape: ShapeLike, id: str | None = None) -> str:
        nid = id or self._fresh_id()
        self._append(NodeSpec(nid, KIND_VARIABLE, (), Shape.of(shape)))
        self.variables.append(nid)
        return nid

    def add_constant(self, value: TensorValue, id: str | None = None) -> str:
        nid = id or self._fresh_id()
        return self._append(NodeSpec(nid, KIND_CONSTANT, (), value.shape, value=value))

    def add_componentwise(self, op: str, inputs: Sequence[str], id: str | None = None) -> str:
        shapes = [self.node(i).output_shape for i in inputs]
        out = infer_componentwise(op, shapes)
        nid = id or self._fresh_id()
        return self._append(NodeSpec(nid, KIND_COMPONENTWISE, tuple(inputs), out, cw_op=op))

    def add_einsum(self, inputs: Sequence[str], output_shape: ShapeLike, id: str | None = None) -> str:
        shapes = [self.node(i).output_shape for i in inputs]
        out = infer_einsum(shapes, Shape.of(output_shape))
        nid = id or self._fresh_id()
        return self._append(NodeSpec(nid, KIND_EINSUM, tuple(inputs), out))

    def add_reduce(self, input: str, dims: Sequence[str], kind: str, id: str | None = None) -> str:
        out = infer_reduce(self.node(input).output_shape, dims, kind)
        nid = id or self._fresh_id()
        return self._append(
            NodeSpec(nid, KIND_REDUCE, (input,), out, reduce_dims=tuple(dims), reduce_kind=kind)
        )

    def add_reshape(self, input: str, output_shape: ShapeLike, id: str | None = None) -> str:
        out = infer_reshape(self.node(input).output_shape, Shape.of(output_shape))
        nid = id or self._fresh_id()
        return self._append(NodeSpec(nid, KIND_RESHAPE, (input,), out))


# -- dense evaluation ------------------------------------------------------


def broadcast_array(array: np.ndarray, from_shape: Shape, to_shape: Shape) -> np.ndarray:
    """Align `array` (axes named by from_shape) to to_shape's axis order.

    from_shape's dimension names must be a subset of to_shape's.  Sizes may
    differ per axis (they do for tensor slices); missing axes broadcast.
    """
    if from_shape.names == to_shape.names:
        return array
    perm = sorted(range(from_shape.rank), key=lambda i: to_shape.index(from_shape.names[i]))
    arr = np.transpose(array, perm)
    idx = tuple(
        slice(None) if from_shape.has(name) else np.newaxis for name in to_shape.names
    )
    return arr[idx]


def einsum_subscripts(input_shapes: Sequence[Shape], output_shape: Shape) -> str:
    """np.einsum subscripts with one letter per distinct dimension name."""
    letters = iter(string.ascii_letters)
    assigned: dict[str, str] = {}

    def sub(shape: Shape) -> str:
        out = []
        for name in shape.names:
            if name not in assigned:
                try:
                    assigned[name] = next(letters)
                except StopIteration:
                    raise ValueError("einsum with more than 52 distinct dimensions") from None
            out.append(assigned[name])
        return "".join(out)

    ins = ",".join(sub(s) for s in input_shapes)
    return f"{ins}->{sub(output_shape)}"


def apply_componentwise(op: str, arrays: Sequence[np.ndarray], shapes: Sequence[Shape],
                        out_shape: Shape) -> np.ndarray:
    fn = COMPONENTWISE_OPS[op][1]
    aligned = [broadcast_array(a, s, out_shape) for a, s in zip(arrays, shapes)]
    return np.asarray(fn(*aligned), dtype=np.float64)


def apply_einsum(arrays: Sequence[np.ndarray], shapes: Sequence[Shape],
                 out_shape: Shape) -> np.ndarray:
    subs = einsum_subscripts(shapes, out_shape)
    return np.einsum(subs, *arrays)


def apply_reduce(array: np.ndarray, shape: Shape, dims: Sequence[str], kind: str) -> np.ndarray:
    axes = tuple(shape.index(d) for d in dims)
    if kind == "sum":
        return np.sum(array, axis=axes)
    return np.max(array, axis=axes)


def reference_execute(
    graph: Graph,
    input_values: Mapping[str, TensorValue] | None = None,
    variable_values: Mapping[str, TensorValue] | None = None,
) -> dict[str, TensorValue]:
    """Evaluate every node on a single device; returns id -> value."""
    input_values = input_values or {}
    variable_values = variable_values or {}
    values: dict[str, np.ndarray] = {}
    out: dict[str, TensorValue] = {}
    for node in graph.nodes:
        if node.kind in (KIND_INPUT, KIND_VARIABLE):
            source = input_values if node.kind == KIND_INPUT else variable_values
            if node.id not in source:
                raise MissingBinding(f"no value bound for {node.kind} node {node.id!r}")
            bound = source[node.id]
            if bound.shape != node.output_shape:
                raise ShapeMismatch(
                    f"node {node.id!r} expects {node.output_shape}, got {bound.shape}"
                )
            arr = bound.array
        elif node.kind == KIND_CONSTANT:
            arr = node.value.array
        elif node.kind == KIND_COMPONENTWISE:
            shapes = [graph.node(i).output_shape for i in node.inputs]
            arr = apply_componentwise(
                node.cw_op, [values[i] for i in node.inputs], shapes, node.output_shape
            )
        elif node.kind == KIND_EINSUM:
            shapes = [graph.node(i).output_shape for i in node.inputs]
            arr = apply_einsum([values[i] for i in node.inputs], shapes, node.output_shape)
        elif node.kind == KIND_REDUCE:
            arr = apply_reduce(
                values[node.inputs[0]],
                graph.node(node.inputs[0]).output_shape,
                node.reduce_dims,
                node.reduce_kind,
            )
        elif node.kind == KIND_RESHAPE:
            arr = values[node.inputs[0]].reshape(node.output_shape.sizes)
        else:  # pragma: no cover - kinds are fixed at build time
            raise ValueError(f"unknown node kind {node.kind!r}")
        values[node.id] = arr
        out[node.id] = TensorValue(node.output_shape, arr)
    return out
