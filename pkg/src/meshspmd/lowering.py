"""Compilation of (graph, layout, mesh) into per-processor SPMD programs.

The lowered program is a single instruction sequence shared by every
processor; only input slicing and collective group membership depend on the
coordinate.  Local ops run on slices.  Communication appears where the math
requires it: allreduce after reductions and einsums whose reduced-out dims
are split, and gather / exchange / slice steps for reshapes that change
which dimensions are split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import collectives as coll
from .errors import (
    IllegalLayout,
    InternalShapeMismatch,
    MissingBinding,
    ShapeMismatch,
    UnsupportedReshape,
)
from .ir import (
    KIND_COMPONENTWISE,
    KIND_CONSTANT,
    KIND_EINSUM,
    KIND_INPUT,
    KIND_REDUCE,
    KIND_RESHAPE,
    KIND_VARIABLE,
    Dimension,
    Graph,
    NodeSpec,
    Shape,
    TensorValue,
    apply_componentwise,
    apply_einsum,
    apply_reduce,
)
from .layout import (
    ComputationLayout,
    Mesh,
    TensorLayout,
    extract_slice,
    restrict,
    slice_shape,
    validate_layout,
)
from .layout import assemble as assemble_slices


@dataclass(frozen=True)
class LocalComponentWise:
    op: str
    inputs: tuple[str, ...]
    output: str


@dataclass(frozen=True)
class LocalEinsum:
    inputs: tuple[str, ...]
    output_shape: Shape  # local shape, also recorded in buffer_shapes
    output: str


@dataclass(frozen=True)
class LocalReduce:
    input: str
    dims: tuple[str, ...]
    kind: str
    output: str


@dataclass(frozen=True)
class LocalSlice:
    """Take this processor's block of one axis; the block index comes from
    the processor's coordinate along `mesh_dim`."""

    input: str
    axis: int
    dim_name: str
    mesh_dim: str
    output: str


@dataclass(frozen=True)
class LocalReshape:
    """Row-major reinterpretation of the local buffer (possibly a pure
    dimension rename)."""

    input: str
    output: str


@dataclass(frozen=True)
class Collective:
    kind: str  # allreduce | allgather | alltoall
    mesh_dim: str
    operand: str
    output: str
    reduce_kind: str | None = None  # allreduce
    concat_axis: int | None = None  # allgather, alltoall
    split_axis: int | None = None  # alltoall


Instruction = (
    "LocalComponentWise | LocalEinsum | LocalReduce | LocalSlice | LocalReshape | Collective"
)


@dataclass
class LoweredProgram:
    """A processor-independent instruction sequence plus buffer metadata."""

    instructions: list
    buffer_shapes: dict[str, Shape]
    bindings: dict[str, str]  # graph node id -> buffer id
    initial: list[tuple[str, str]]  # (buffer id, node id) initialized by slicing
    graph: Graph
    layout: ComputationLayout
    mesh: Mesh
    kept_nodes: list[str]

    def node_layout(self, node_id: str) -> TensorLayout:
        return restrict(self.layout, self.graph.node(node_id).output_shape)

    def local_shape(self, node_id: str) -> Shape:
        node = self.graph.node(node_id)
        return slice_shape(node.output_shape, self.node_layout(node_id), self.mesh)

    def to_json(self) -> str:
        """Stable serialization used by golden tests; identical for every
        processor by construction."""

        def shape_json(s: Shape):
            return [[d.name, d.size] for d in s.dims]

        instrs = []
        for ins in self.instructions:
            rec = {"type": type(ins).__name__}
            for key, val in vars(ins).items():
                if isinstance(val, Shape):
                    rec[key] = shape_json(val)
                elif isinstance(val, tuple):
                    rec[key] = list(val)
                else:
                    rec[key] = val
            instrs.append(rec)
        doc = {
            "instructions": instrs,
            "buffers": {b: shape_json(s) for b, s in self.buffer_shapes.items()},
            "bindings": dict(self.bindings),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


class _Lowerer:
    def __init__(self, graph: Graph, layout: ComputationLayout, mesh: Mesh):
        self.graph = graph
        self.layout = layout
        self.mesh = mesh
        self.instructions: list = []
        self.buffer_shapes: dict[str, Shape] = {}
        self.bindings: dict[str, str] = {}
        self.initial: list[tuple[str, str]] = []
        self._counter = 0

    def fresh(self, shape: Shape) -> str:
        buf = f"b{self._counter}"
        self._counter += 1
        self.buffer_shapes[buf] = shape
        return buf

    def local_shape(self, node: NodeSpec) -> Shape:
        return slice_shape(node.output_shape, restrict(self.layout, node.output_shape), self.mesh)

    def emit(self, instruction) -> None:
        self.instructions.append(instruction)

    # -- per-kind lowering -------------------------------------------------

    def lower_leaf(self, node: NodeSpec) -> str:
        buf = self.fresh(self.local_shape(node))
        self.initial.append((buf, node.id))
        return buf

    def lower_componentwise(self, node: NodeSpec) -> str:
        out = self.fresh(self.local_shape(node))
        ins = tuple(self.bindings[i] for i in node.inputs)
        self.emit(LocalComponentWise(node.cw_op, ins, out))
        return out

    def _allreduce_dims(self, reduced_names: Sequence[str], node: NodeSpec) -> list[str]:
        """Mesh dims needing an allreduce, in mesh declaration order."""
        hit: dict[str, list[str]] = {}
        for name in reduced_names:
            m = self.layout.mesh_dim_for(name)
            if m is not None and self.mesh.has(m):
                hit.setdefault(m, []).append(name)
        for m, names in hit.items():
            if len(names) > 1:
                raise IllegalLayout(
                    [
                        f"einsum {node.id!r}: reduced dims {names} are split across "
                        f"the same mesh dim {m!r}; partial products cannot be "
                        f"combined with a single allreduce"
                    ]
                )
        return [m for m in self.mesh.names if m in hit]

    def lower_reduce(self, node: NodeSpec) -> str:
        local_out = self.local_shape(node)
        buf = self.fresh(local_out)
        self.emit(LocalReduce(self.bindings[node.inputs[0]], node.reduce_dims, node.reduce_kind, buf))
        for m in self._allreduce_dims(node.reduce_dims, node):
            nxt = self.fresh(local_out)
            self.emit(Collective(coll.ALLREDUCE, m, buf, nxt, reduce_kind=node.reduce_kind))
            buf = nxt
        return buf

    def lower_einsum(self, node: NodeSpec) -> str:
        union: list[str] = []
        for i in node.inputs:
            for name in self.graph.node(i).output_shape.names:
                if name not in union:
                    union.append(name)
        reduced = [n for n in union if not node.output_shape.has(n)]
        local_out = self.local_shape(node)
        buf = self.fresh(local_out)
        self.emit(LocalEinsum(tuple(self.bindings[i] for i in node.inputs), local_out, buf))
        for m in self._allreduce_dims(reduced, node):
            nxt = self.fresh(local_out)
            self.emit(Collective(coll.ALLREDUCE, m, buf, nxt, reduce_kind="sum"))
            buf = nxt
        return buf

    def lower_reshape(self, node: NodeSpec) -> str:
        in_shape = self.graph.node(node.inputs[0]).output_shape
        out_shape = node.output_shape
        tl_in = restrict(self.layout, in_shape)
        tl_out = restrict(self.layout, out_shape)
        in_pos = {m: p for p, m in tl_in.assignments if self.mesh.dim_size(m) > 1}
        out_pos = {m: p for p, m in tl_out.assignments if self.mesh.dim_size(m) > 1}

        def stride(shape: Shape, pos: int) -> int:
            s = 1
            for d in shape.dims[pos + 1:]:
                s *= d.size
            return s

        # Classify each involved mesh dim: gather (split only in input),
        # slice (split only in output), or both.  A dim split on both sides
        # needs no communication when the input and output block layouts
        # cover identical element ranges; otherwise a pure rename can use a
        # single exchange, and anything else falls back to gather + slice.
        gathers: list[str] = []
        slices: list[str] = []
        keeps: list[str] = []
        exchanges: list[str] = []
        pure_rename = in_shape.sizes == out_shape.sizes
        for m in self.mesh.names:
            g = self.mesh.dim_size(m)
            p, q = in_pos.get(m), out_pos.get(m)
            if p is None and q is None:
                continue
            if p is not None and q is None:
                gathers.append(m)
            elif p is None and q is not None:
                slices.append(m)
            else:
                same_blocks = (
                    stride(in_shape, p) * (in_shape.dims[p].size // g)
                    == stride(out_shape, q) * (out_shape.dims[q].size // g)
                )
                if same_blocks:
                    keeps.append(m)
                elif pure_rename:
                    exchanges.append(m)
                else:
                    gathers.append(m)
                    slices.append(m)

        # An exchange redistributes along its output axis; that axis must not
        # remain split by another surviving mesh dim when the exchange runs.
        changed = True
        while changed:
            changed = False
            surviving = set(keeps) | set(exchanges)
            for m in list(exchanges):
                blockers = [
                    m2 for m2 in surviving
                    if m2 != m and in_pos.get(m2) == out_pos[m]
                ]
                if blockers:
                    exchanges.remove(m)
                    gathers.append(m)
                    slices.append(m)
                    changed = True
        gathers = [m for m in self.mesh.names if m in gathers]
        slices = [m for m in self.mesh.names if m in slices]
        exchanges = [m for m in self.mesh.names if m in exchanges]

        cur = self.bindings[node.inputs[0]]
        cur_sizes = list(slice_shape(in_shape, tl_in, self.mesh).sizes)
        emitted_comm = False

        def in_named(sizes: Sequence[int]) -> Shape:
            return Shape(tuple(Dimension(d.name, s) for d, s in zip(in_shape.dims, sizes)))

        for m in gathers:
            g = self.mesh.dim_size(m)
            p = in_pos[m]
            cur_sizes[p] *= g
            nxt = self.fresh(in_named(cur_sizes))
            self.emit(Collective(coll.ALLGATHER, m, cur, nxt, concat_axis=p))
            cur = nxt
            emitted_comm = True

        for m in exchanges:
            g = self.mesh.dim_size(m)
            p, q = in_pos[m], out_pos[m]
            if cur_sizes[q] % g != 0:
                raise UnsupportedReshape(
                    f"reshape {node.id!r}: exchange along mesh dim {m!r} would split "
                    f"a local extent of {cur_sizes[q]} into {g} blocks"
                )
            cur_sizes[q] //= g
            cur_sizes[p] *= g
            nxt = self.fresh(in_named(cur_sizes))
            self.emit(Collective(coll.ALLTOALL, m, cur, nxt, split_axis=q, concat_axis=p))
            cur = nxt
            emitted_comm = True

        # Local reindex to output dimension names (still split along kept and
        # exchanged mesh dims, not yet split along pending slice dims).
        target_sizes = [d.size for d in out_shape.dims]
        for m in keeps + exchanges:
            target_sizes[out_pos[m]] //= self.mesh.dim_size(m)
        target_shape = Shape(
            tuple(Dimension(d.name, s) for d, s in zip(out_shape.dims, target_sizes))
        )
        if cur_sizes == target_sizes and emitted_comm:
            self.buffer_shapes[cur] = target_shape  # fold the rename
        elif cur_sizes == target_sizes and slices:
            pass  # positions line up; pending slices produce renamed buffers
        else:
            nxt = self.fresh(target_shape)
            self.emit(LocalReshape(cur, nxt))
            cur = nxt

        working = list(target_sizes)
        for m in slices:
            g = self.mesh.dim_size(m)
            q = out_pos[m]
            working[q] //= g
            nxt = self.fresh(
                Shape(tuple(Dimension(d.name, s) for d, s in zip(out_shape.dims, working)))
            )
            self.emit(LocalSlice(cur, q, out_shape.dims[q].name, m, nxt))
            cur = nxt
        return cur

    def run(self, kept: list[str]) -> LoweredProgram:
        for node in self.graph.nodes:
            if node.id not in kept:
                continue
            if node.kind in (KIND_INPUT, KIND_VARIABLE, KIND_CONSTANT):
                buf = self.lower_leaf(node)
            elif node.kind == KIND_COMPONENTWISE:
                buf = self.lower_componentwise(node)
            elif node.kind == KIND_REDUCE:
                buf = self.lower_reduce(node)
            elif node.kind == KIND_EINSUM:
                buf = self.lower_einsum(node)
            elif node.kind == KIND_RESHAPE:
                buf = self.lower_reshape(node)
            else:  # pragma: no cover
                raise ValueError(f"unknown node kind {node.kind!r}")
            self.bindings[node.id] = buf
        return LoweredProgram(
            self.instructions,
            self.buffer_shapes,
            self.bindings,
            self.initial,
            self.graph,
            self.layout,
            self.mesh,
            kept,
        )


def lower(graph: Graph, layout: ComputationLayout, mesh: Mesh,
          outputs: Sequence[str] | None = None) -> LoweredProgram:
    """Compile the graph under the layout into a single SPMD program.

    `outputs` limits lowering to the ancestors of the named nodes; by
    default every node is lowered.
    """
    violations = validate_layout(graph, layout, mesh)
    if violations:
        raise IllegalLayout(violations)
    if outputs is None:
        kept = [n.id for n in graph.nodes]
    else:
        keep = graph.ancestors(outputs)
        kept = [n.id for n in graph.nodes if n.id in keep]
    return _Lowerer(graph, layout, mesh).run(kept)


# -- simulation ---------------------------------------------------------------


@dataclass
class SpmdRun:
    """Every processor's slice of every lowered node, plus the comm ledger."""

    lowered: LoweredProgram
    slices: dict[str, dict[tuple, TensorValue]]
    ledger: coll.CommLedger

    def assemble(self, node_id: str) -> TensorValue:
        node = self.lowered.graph.node(node_id)
        return assemble_slices(
            self.slices[node_id],
            self.lowered.node_layout(node_id),
            self.lowered.mesh,
            node.output_shape,
        )


def execute(
    lowered: LoweredProgram,
    input_values: Mapping[str, TensorValue] | None = None,
    variable_values: Mapping[str, TensorValue] | None = None,
) -> SpmdRun:
    """Simulate every processor running the lowered program in lockstep.

    Deterministic: identical inputs produce bitwise identical outputs.
    """
    graph, layout, mesh = lowered.graph, lowered.layout, lowered.mesh
    input_values = input_values or {}
    variable_values = variable_values or {}
    coords = mesh.coords()
    env: dict[tuple, dict[str, np.ndarray]] = {c: {} for c in coords}
    ledger = coll.CommLedger(coords)

    for buf, node_id in lowered.initial:
        node = graph.node(node_id)
        if node.kind == KIND_CONSTANT:
            full = node.value
        else:
            source = input_values if node.kind == KIND_INPUT else variable_values
            if node_id not in source:
                raise MissingBinding(f"no value bound for {node.kind} node {node_id!r}")
            full = source[node_id]
            if full.shape != node.output_shape:
                raise ShapeMismatch(
                    f"node {node_id!r} expects {node.output_shape}, got {full.shape}"
                )
        tl = lowered.node_layout(node_id)
        for coord in coords:
            env[coord][buf] = extract_slice(full, tl, mesh, coord).array

    groups = {m: coll.groups_for(mesh, m) for m in mesh.names}

    def check(coord, buf, arr):
        want = lowered.buffer_shapes[buf].sizes
        if arr.shape != want:
            raise InternalShapeMismatch(
                f"buffer {buf!r} on {coord}: computed shape {arr.shape}, lowered shape {want}"
            )
        return arr

    for ins in lowered.instructions:
        if isinstance(ins, Collective):
            for group in groups[ins.mesh_dim]:
                operand_shape = None
                vals = []
                for member in group.members:
                    arr = env[member][ins.operand]
                    if operand_shape is None:
                        operand_shape = _shape_like(lowered.buffer_shapes[ins.operand], arr)
                    vals.append(TensorValue(operand_shape, arr))
                if ins.kind == coll.ALLREDUCE:
                    outs = coll.allreduce(group, vals, ins.reduce_kind, ledger)
                elif ins.kind == coll.ALLGATHER:
                    outs = coll.allgather(group, vals, ins.concat_axis, ledger)
                else:
                    outs = coll.alltoall(group, vals, ins.split_axis, ins.concat_axis, ledger)
                for member, out in zip(group.members, outs):
                    env[member][ins.output] = check(member, ins.output, out.array)
            continue
        for coord in coords:
            buffers = env[coord]
            if isinstance(ins, LocalComponentWise):
                shapes = [lowered.buffer_shapes[b] for b in ins.inputs]
                arr = apply_componentwise(
                    ins.op, [buffers[b] for b in ins.inputs], shapes,
                    lowered.buffer_shapes[ins.output],
                )
            elif isinstance(ins, LocalEinsum):
                shapes = [lowered.buffer_shapes[b] for b in ins.inputs]
                arr = apply_einsum([buffers[b] for b in ins.inputs], shapes, ins.output_shape)
            elif isinstance(ins, LocalReduce):
                arr = apply_reduce(
                    buffers[ins.input], lowered.buffer_shapes[ins.input], ins.dims, ins.kind
                )
            elif isinstance(ins, LocalReshape):
                arr = buffers[ins.input].reshape(lowered.buffer_shapes[ins.output].sizes)
            elif isinstance(ins, LocalSlice):
                block = lowered.buffer_shapes[ins.output].sizes[ins.axis]
                k = coord[mesh.axis(ins.mesh_dim)]
                index = [slice(None)] * buffers[ins.input].ndim
                index[ins.axis] = slice(k * block, (k + 1) * block)
                arr = buffers[ins.input][tuple(index)]
            else:  # pragma: no cover
                raise ValueError(f"unknown instruction {ins!r}")
            buffers[ins.output] = check(coord, ins.output, arr)

    slices: dict[str, dict[tuple, TensorValue]] = {}
    for node_id in lowered.kept_nodes:
        local = lowered.local_shape(node_id)
        buf = lowered.bindings[node_id]
        slices[node_id] = {
            coord: TensorValue(local, env[coord][buf]) for coord in coords
        }
    return SpmdRun(lowered, slices, ledger)


def _shape_like(shape: Shape, arr: np.ndarray) -> Shape:
    if shape.sizes == arr.shape:
        return shape
    return Shape(tuple(Dimension(d.name, s) for d, s in zip(shape.dims, arr.shape)))


def comm_summary(lowered: LoweredProgram, mesh: Mesh | None = None) -> dict[str, dict[str, int]]:
    """Per-processor communicated elements by mesh dim and collective kind,
    computed statically; matches the executed ledger exactly."""
    mesh = mesh or lowered.mesh
    summary: dict[str, dict[str, int]] = {}
    for ins in lowered.instructions:
        if not isinstance(ins, Collective):
            continue
        g = mesh.dim_size(ins.mesh_dim)
        if g == 1:
            continue
        slice_elems = lowered.buffer_shapes[ins.operand].element_count()
        if ins.kind == coll.ALLREDUCE:
            cost = slice_elems
        elif ins.kind == coll.ALLGATHER:
            cost = (g - 1) * slice_elems
        else:
            cost = slice_elems * (g - 1) // g
        bucket = summary.setdefault(ins.mesh_dim, {})
        bucket[ins.kind] = bucket.get(ins.kind, 0) + cost
    return summary


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Element-wise |a-b| / max(|a|, |b|), with absolute difference where
    both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    rel = np.where(denom > 0, diff / np.where(denom == 0, 1.0, denom), diff)
    return float(np.max(rel)) if rel.size else 0.0
