"""JSON program files: dims, mesh, layout, graph, bindings.

The file format is the concrete syntax for building a Graph + Mesh +
ComputationLayout outside Python.  Bindings are either inline row-major
arrays or seeded-random specs with a pinned, portable PRNG (splitmix64) so
runs reproduce bit-for-bit across machines and implementations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MeshSpmdError, ProgramFileError
from .ir import (
    KIND_INPUT,
    KIND_VARIABLE,
    Graph,
    NodeSpec,
    Shape,
    TensorValue,
)
from .layout import ComputationLayout, Mesh

_MASK64 = (1 << 64) - 1
RNG_ALGORITHM = "splitmix64"


class SplitMix64:
    """splitmix64 with 64-bit state; doubles use the top 53 bits.

    Chosen for the binding contract because it is tiny, well specified, and
    trivially portable across languages.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_double()


def uniform_value(shape, seed: int, low: float = -1.0, high: float = 1.0) -> TensorValue:
    """A seeded uniform tensor filled in row-major order."""
    s = Shape.of(shape)
    rng = SplitMix64(seed)
    data = [rng.uniform(low, high) for _ in range(s.element_count())]
    return TensorValue(s, np.array(data))


@dataclass
class Program:
    """A parsed program file."""

    graph: Graph
    mesh: Mesh
    layout: ComputationLayout
    binding_specs: dict[str, object]
    loss: str | None = None
    wrt: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    path: str | None = None

    def default_outputs(self) -> list[str]:
        """Sink nodes: produced but never consumed."""
        consumed = {i for n in self.graph.nodes for i in n.inputs}
        return [n.id for n in self.graph.nodes if n.id not in consumed]

    def effective_outputs(self) -> list[str]:
        return list(self.outputs) if self.outputs else self.default_outputs()

    def effective_wrt(self) -> list[str]:
        return list(self.wrt) if self.wrt else list(self.graph.variables)

    def materialize_bindings(self, seed_override: int | None = None) -> dict[str, TensorValue]:
        values: dict[str, TensorValue] = {}
        for node_id, spec in self.binding_specs.items():
            shape = self.graph.node(node_id).output_shape
            if isinstance(spec, dict):
                seed = int(spec["seed"])
                if seed_override is not None:
                    seed ^= seed_override & _MASK64
                values[node_id] = uniform_value(
                    shape, seed, float(spec.get("low", -1.0)), float(spec.get("high", 1.0))
                )
            else:
                try:
                    values[node_id] = TensorValue(shape, np.array(spec, dtype=np.float64))
                except MeshSpmdError as e:
                    raise ProgramFileError(f"bindings.{node_id}", str(e)) from None
        return values

    def split_bindings(self, values: Mapping[str, TensorValue]):
        """Partition bound values into (input values, variable values)."""
        ins, vars_ = {}, {}
        for node_id, v in values.items():
            kind = self.graph.node(node_id).kind
            if kind == KIND_INPUT:
                ins[node_id] = v
            elif kind == KIND_VARIABLE:
                vars_[node_id] = v
        return ins, vars_


def _want(record: dict, key: str, where: str):
    if key not in record:
        raise ProgramFileError(where, f"missing required field {key!r}")
    return record[key]


def _shape_from_names(names: Sequence[str], dims: Mapping[str, int], where: str) -> Shape:
    pairs = []
    for name in names:
        if name not in dims:
            raise ProgramFileError(where, f"dimension {name!r} not declared in dims section")
        pairs.append((name, dims[name]))
    return Shape.of(pairs)


def program_from_dict(doc: dict, path: str | None = None) -> Program:
    if not isinstance(doc, dict):
        raise ProgramFileError("<root>", "program file must be a JSON object")
    dims = doc.get("dims", {})
    if not isinstance(dims, dict):
        raise ProgramFileError("dims", "must be an object of name -> size")
    dims = {str(k): int(v) for k, v in dims.items()}

    try:
        mesh = Mesh.of([(str(n), int(s)) for n, s in _want(doc, "mesh", "<root>")])
    except (TypeError, ValueError) as e:
        raise ProgramFileError("mesh", str(e)) from None
    try:
        layout = ComputationLayout.of(
            [(str(t), str(m)) for t, m in doc.get("layout", [])]
        )
    except (TypeError, ValueError) as e:
        raise ProgramFileError("layout", str(e)) from None

    graph = Graph()
    records = _want(doc, "graph", "<root>")
    for idx, rec in enumerate(records):
        where = f"graph[{idx}]"
        if not isinstance(rec, dict):
            raise ProgramFileError(where, "node record must be an object")
        node_id = str(_want(rec, "id", where))
        kind = str(_want(rec, "kind", where))
        try:
            if kind == "input":
                graph.add_input(_shape_from_names(_want(rec, "shape", where), dims, f"{where}.shape"), node_id)
            elif kind == "variable":
                graph.add_variable(_shape_from_names(_want(rec, "shape", where), dims, f"{where}.shape"), node_id)
            elif kind == "constant":
                shape = _shape_from_names(_want(rec, "shape", where), dims, f"{where}.shape")
                graph.add_constant(TensorValue(shape, np.array(_want(rec, "value", where))), node_id)
            elif kind == "einsum":
                graph.add_einsum(
                    [str(i) for i in _want(rec, "inputs", where)],
                    _shape_from_names(_want(rec, "output_shape", where), dims, f"{where}.output_shape"),
                    node_id,
                )
            elif kind == "reduce":
                graph.add_reduce(
                    str(_want(rec, "input", where)),
                    [str(d) for d in _want(rec, "dims", where)],
                    str(_want(rec, "reduce", where)),
                    node_id,
                )
            elif kind == "componentwise":
                graph.add_componentwise(
                    str(_want(rec, "op", where)),
                    [str(i) for i in _want(rec, "inputs", where)],
                    node_id,
                )
            elif kind == "reshape":
                graph.add_reshape(
                    str(_want(rec, "input", where)),
                    _shape_from_names(_want(rec, "output_shape", where), dims, f"{where}.output_shape"),
                    node_id,
                )
            else:
                raise ProgramFileError(where, f"unknown node kind {kind!r}")
        except ProgramFileError:
            raise
        except (MeshSpmdError, ValueError) as e:
            raise ProgramFileError(where, str(e)) from None

    bindings = doc.get("bindings", {})
    if not isinstance(bindings, dict):
        raise ProgramFileError("bindings", "must be an object of node id -> value spec")
    specs: dict[str, object] = {}
    for node_id, spec in bindings.items():
        where = f"bindings.{node_id}"
        if not graph.has_node(node_id):
            raise ProgramFileError(where, f"unknown node {node_id!r}")
        if graph.node(node_id).kind not in (KIND_INPUT, KIND_VARIABLE):
            raise ProgramFileError(where, "only input and variable nodes take bindings")
        if isinstance(spec, dict):
            algorithm = _want(spec, "algorithm", where)
            if algorithm != RNG_ALGORITHM:
                raise ProgramFileError(where, f"unsupported PRNG algorithm {algorithm!r}")
            if _want(spec, "distribution", where) != "uniform":
                raise ProgramFileError(where, "only the uniform distribution is supported")
            _want(spec, "seed", where)
        elif not isinstance(spec, list):
            raise ProgramFileError(where, "binding must be an array or a seeded-random spec")
        specs[node_id] = spec

    loss = doc.get("loss")
    if loss is not None:
        loss = str(loss)
        if not graph.has_node(loss):
            raise ProgramFileError("loss", f"unknown node {loss!r}")
    wrt = [str(w) for w in doc.get("wrt", [])]
    for w in wrt:
        if not graph.has_node(w):
            raise ProgramFileError("wrt", f"unknown node {w!r}")
    outputs = [str(o) for o in doc.get("outputs", [])]
    for o in outputs:
        if not graph.has_node(o):
            raise ProgramFileError("outputs", f"unknown node {o!r}")

    return Program(graph, mesh, layout, specs, loss, wrt, outputs, path)


def load_program(path: str) -> Program:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ProgramFileError(f"{path}:{e.lineno}:{e.colno}", e.msg) from None
    return program_from_dict(doc, path=path)


# -- writing (used by the corpus generator and tests) -------------------------


def node_to_record(node: NodeSpec) -> dict:
    rec: dict = {"id": node.id, "kind": node.kind}
    if node.kind in ("input", "variable", "constant"):
        rec["shape"] = list(node.output_shape.names)
        if node.kind == "constant":
            rec["value"] = node.value.array.tolist()
    elif node.kind == "einsum":
        rec["inputs"] = list(node.inputs)
        rec["output_shape"] = list(node.output_shape.names)
    elif node.kind == "reduce":
        rec["input"] = node.inputs[0]
        rec["dims"] = list(node.reduce_dims)
        rec["reduce"] = node.reduce_kind
    elif node.kind == "componentwise":
        rec["op"] = node.cw_op
        rec["inputs"] = list(node.inputs)
    elif node.kind == "reshape":
        rec["input"] = node.inputs[0]
        rec["output_shape"] = list(node.output_shape.names)
    return rec


def program_to_dict(
    graph: Graph,
    mesh: Mesh,
    layout: ComputationLayout,
    bindings: Mapping[str, object] | None = None,
    loss: str | None = None,
    wrt: Sequence[str] = (),
    outputs: Sequence[str] = (),
) -> dict:
    doc: dict = {
        "dims": {name: graph.dim_size(name) for name in graph.dim_names()},
        "mesh": [[n, s] for n, s in mesh.dims],
        "layout": [[t, m] for t, m in layout.rules],
        "graph": [node_to_record(n) for n in graph.nodes],
    }
    if bindings:
        doc["bindings"] = dict(bindings)
    if loss is not None:
        doc["loss"] = loss
    if wrt:
        doc["wrt"] = list(wrt)
    if outputs:
        doc["outputs"] = list(outputs)
    return doc


def save_program(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
