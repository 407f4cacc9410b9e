"""Reverse-mode gradient construction on tensor graphs.

Gradient graphs are ordinary graphs: every rule appends standard nodes, so
lowering a gradient graph needs no special cases and communication falls out
of the layout alone.  An einsum's gradient with respect to one input is
itself an einsum of the output adjoint with the remaining inputs, which is
what makes batch-reducing parameter gradients trigger allreduce under data
parallelism.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NonDifferentiableNode, NonScalarLoss
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
)

GradientMap = dict  # differentiated node id -> gradient node id


class _GradBuilder:
    def __init__(self, graph: Graph):
        self.g = graph
        self._ones: dict[tuple, str] = {}
        self._scalars: dict[float, str] = {}

    def ones(self, shape: Shape) -> str:
        key = tuple(shape.pairs())
        if key not in self._ones:
            self._ones[key] = self.g.add_constant(TensorValue.ones(shape))
        return self._ones[key]

    def scalar(self, x: float) -> str:
        if x not in self._scalars:
            self._scalars[x] = self.g.add_constant(TensorValue.scalar(x))
        return self._scalars[x]

    def neg(self, node: str) -> str:
        return self.g.add_componentwise("mul", [node, self.scalar(-1.0)])

    def match_shape(self, node: str, target: Shape) -> str:
        """Sum out dims absent from target, then reorder axes if needed."""
        shape = self.g.node(node).output_shape
        if shape == target:
            return node
        missing = [n for n in shape.names if not target.has(n)]
        out = node
        if missing:
            out = self.g.add_reduce(out, missing, "sum")
        if self.g.node(out).output_shape != target:
            out = self.g.add_einsum([out], target)
        return out

    # -- per-kind adjoint propagation ---------------------------------------

    def componentwise(self, node: NodeSpec, adj: str) -> list[tuple[str, str]]:
        g = self.g
        op = node.cw_op
        out = []
        if op == "add":
            for inp in node.inputs:
                out.append((inp, self.match_shape(adj, g.node(inp).output_shape)))
        elif op == "sub":
            a, b = node.inputs
            out.append((a, self.match_shape(adj, g.node(a).output_shape)))
            out.append((b, self.match_shape(self.neg(adj), g.node(b).output_shape)))
        elif op == "mul":
            a, b = node.inputs
            out.append((a, self.match_shape(
                g.add_componentwise("mul", [adj, b]), g.node(a).output_shape)))
            out.append((b, self.match_shape(
                g.add_componentwise("mul", [adj, a]), g.node(b).output_shape)))
        elif op == "div":
            a, b = node.inputs
            da = g.add_componentwise("div", [adj, b])
            out.append((a, self.match_shape(da, g.node(a).output_shape)))
            db = self.neg(g.add_componentwise("div", [
                g.add_componentwise("mul", [adj, node.id]), b]))
            out.append((b, self.match_shape(db, g.node(b).output_shape)))
        elif op == "relu":
            mask = g.add_componentwise("step", [node.inputs[0]])
            out.append((node.inputs[0], g.add_componentwise("mul", [adj, mask])))
        elif op == "exp":
            out.append((node.inputs[0], g.add_componentwise("mul", [adj, node.id])))
        elif op in ("step", "greater_equal"):
            pass  # piecewise constant: zero gradient everywhere it exists
        else:  # pragma: no cover - op set is closed
            raise NonDifferentiableNode(f"no gradient rule for component-wise op {op!r}")
        return out

    def einsum(self, node: NodeSpec, adj: str) -> list[tuple[str, str]]:
        g = self.g
        out = []
        for i, inp in enumerate(node.inputs):
            target = g.node(inp).output_shape
            others = [x for j, x in enumerate(node.inputs) if j != i]
            present = set(node.output_shape.names)
            for o in others:
                present.update(g.node(o).output_shape.names)
            parts = [adj] + others
            for d in target.dims:
                if d.name not in present:
                    parts.append(self.ones(Shape((d,))))
            out.append((inp, g.add_einsum(parts, target)))
        return out

    def reduce(self, node: NodeSpec, adj: str) -> list[tuple[str, str]]:
        g = self.g
        inp = node.inputs[0]
        in_shape = g.node(inp).output_shape
        if node.reduce_kind == "sum":
            contrib = g.add_componentwise("mul", [self.ones(in_shape), adj])
            return [(inp, contrib)]
        return [(inp, self._max_grad(node, adj))]

    def _max_grad(self, node: NodeSpec, adj: str) -> str:
        """Subgradient of reduce-max: ties route to the lowest linear index.

        Multi-dimension reductions are staged one dimension at a time,
        rightmost reduced dim first, so the composite winner is the
        lexicographically (row-major) smallest tied index.
        """
        g = self.g
        x = node.inputs[0]
        x_shape = g.node(x).output_shape
        order = sorted(node.reduce_dims, key=x_shape.index)
        seq = list(reversed(order))
        stage_inputs = [x]
        for d in seq[:-1]:
            stage_inputs.append(g.add_reduce(stage_inputs[-1], [d], "max"))
        stage_maxes = stage_inputs[1:] + [node.id]
        a = adj
        for t, d, m in reversed(list(zip(stage_inputs, seq, stage_maxes))):
            a = self._single_dim_max_grad(t, d, m, a)
        return a

    def _single_dim_max_grad(self, t: str, dim: str, m: str, adj: str) -> str:
        g = self.g
        t_shape = g.node(t).output_shape
        size = t_shape.size_of(dim)
        ties = g.add_componentwise("greater_equal", [t, m])
        fresh = g.fresh_dim_name(dim)
        renamed = Shape(tuple(
            Dimension(fresh, d.size) if d.name == dim else d for d in t_shape.dims
        ))
        shifted = g.add_reshape(ties, renamed)
        earlier = g.add_constant(TensorValue.of(
            [(fresh, size), (dim, size)], np.triu(np.ones((size, size)), 1)
        ))
        prior_ties = g.add_einsum([shifted, earlier], t_shape)
        is_first = g.add_componentwise("greater_equal", [self.scalar(0.0), prior_ties])
        mask = g.add_componentwise("mul", [ties, is_first])
        return g.add_componentwise("mul", [mask, adj])

    def reshape(self, node: NodeSpec, adj: str) -> list[tuple[str, str]]:
        in_shape = self.g.node(node.inputs[0]).output_shape
        return [(node.inputs[0], self.g.add_reshape(adj, in_shape))]


def gradients(graph: Graph, loss: str, wrt: Sequence[str]) -> tuple[Graph, GradientMap]:
    """Append reverse-accumulation gradient nodes for d(loss)/d(wrt).

    Returns the extended graph and a map from each wrt node id to the node
    holding its gradient (same shape, same dimension names).  Accumulation
    of multiple contributions is a left fold in discovery order, so the
    result graph is deterministic.
    """
    loss_node = graph.node(loss)
    if loss_node.output_shape.rank != 0:
        raise NonScalarLoss(
            f"loss node {loss!r} has shape {loss_node.output_shape}, expected a scalar"
        )
    for w in wrt:
        graph.node(w)

    g = graph.copy()
    b = _GradBuilder(g)
    cone = graph.ancestors([loss])
    order = [n.id for n in graph.nodes if n.id in cone]
    contribs: dict[str, list[str]] = {nid: [] for nid in order}
    contribs[loss].append(b.ones(Shape(())))
    adjoints: dict[str, str] = {}

    for nid in reversed(order):
        node = g.node(nid)
        parts = contribs[nid]
        if not parts:
            adj = g.add_constant(TensorValue.zeros(node.output_shape))
        else:
            adj = parts[0]
            for extra in parts[1:]:
                adj = g.add_componentwise("add", [adj, extra])
        adjoints[nid] = adj
        if node.kind in (KIND_INPUT, KIND_VARIABLE, KIND_CONSTANT):
            continue
        if node.kind == KIND_COMPONENTWISE:
            flows = b.componentwise(node, adj)
        elif node.kind == KIND_EINSUM:
            flows = b.einsum(node, adj)
        elif node.kind == KIND_REDUCE:
            flows = b.reduce(node, adj)
        elif node.kind == KIND_RESHAPE:
            flows = b.reshape(node, adj)
        else:  # pragma: no cover - kind set is closed
            raise NonDifferentiableNode(f"no gradient rule for node kind {node.kind!r}")
        for inp, contrib in flows:
            contribs[inp].append(contrib)

    grad_map: GradientMap = {}
    for w in wrt:
        if w in adjoints:
            grad_map[w] = adjoints[w]
        else:
            grad_map[w] = g.add_constant(TensorValue.zeros(graph.node(w).output_shape))
    return g, grad_map
