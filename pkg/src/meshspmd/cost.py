"""Analytic per-processor cost estimation for a (graph, layout, mesh) triple.

FLOPs count einsums only (multiply-add pairs as 2 FLOPs): they dominate and
the communication/computation ratio is stated against them.  Communication
is the static collective summary of the lowered program, which matches the
executed ledger exactly.  Memory is the peak of live local buffers under the
executor's actual topological schedule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .ir import Graph, KIND_EINSUM, NodeSpec
from .layout import ComputationLayout, Mesh
from .lowering import Collective, LoweredProgram, comm_summary, lower


@dataclass(frozen=True)
class HardwareProfile:
    """Machine constants: seconds per FLOP and seconds per element per link."""

    seconds_per_flop: float
    seconds_per_element: float

    def __post_init__(self):
        if self.seconds_per_flop <= 0 or self.seconds_per_element <= 0:
            raise ValueError("hardware profile constants must be positive")


@dataclass(frozen=True)
class CostReport:
    flops_per_processor: int
    flops_by_node: tuple[tuple[str, int], ...]
    comm_elements: tuple[tuple[str, tuple[tuple[str, int], ...]], ...]  # mesh dim -> kind -> count
    comm_elements_total: int
    peak_memory_elements: int
    peak_live_buffers: tuple[tuple[str, int], ...]
    ratio: float
    compute_seconds: float | None = None
    comm_seconds: float | None = None

    def comm_as_dict(self) -> dict[str, dict[str, int]]:
        return {m: dict(kinds) for m, kinds in self.comm_elements}

    def flops_as_dict(self) -> dict[str, int]:
        return dict(self.flops_by_node)


def _einsum_union(graph: Graph, node: NodeSpec) -> list:
    union = []
    seen = set()
    for i in node.inputs:
        for d in graph.node(i).output_shape.dims:
            if d.name not in seen:
                seen.add(d.name)
                union.append(d)
    return union


def _einsum_flops(graph: Graph, node: NodeSpec, layout: ComputationLayout, mesh: Mesh) -> int:
    union = _einsum_union(graph, node)
    work = 2
    for d in union:
        work *= d.size
    split = set()
    for d in union:
        m = layout.mesh_dim_for(d.name)
        if m is not None and mesh.has(m):
            split.add(m)
    divisor = 1
    for m in split:
        divisor *= mesh.dim_size(m)
    return work // divisor


def _peak_memory(lowered: LoweredProgram) -> tuple[int, tuple[tuple[str, int], ...]]:
    define: dict[str, int] = {}
    last_use: dict[str, int] = {}
    for buf, _ in lowered.initial:
        define[buf] = 0
        last_use[buf] = 0
    for idx, ins in enumerate(lowered.instructions, start=1):
        if isinstance(ins, Collective):
            operands = (ins.operand,)
        elif hasattr(ins, "inputs"):
            operands = tuple(ins.inputs)
        else:
            operands = (ins.input,)
        for b in operands:
            last_use[b] = idx
        define[ins.output] = idx
        last_use.setdefault(ins.output, idx)
    # Buffers holding sink nodes stay live to the end of the schedule.
    end = len(lowered.instructions) + 1
    consumed = set()
    for nid in lowered.kept_nodes:
        consumed.update(lowered.graph.node(nid).inputs)
    for nid in lowered.kept_nodes:
        if nid not in consumed:
            last_use[lowered.bindings[nid]] = end

    sizes = {b: s.element_count() for b, s in lowered.buffer_shapes.items()}
    peak, peak_live = 0, ()
    for t in range(0, end + 1):
        live = tuple(
            (b, sizes[b]) for b in sizes
            if define.get(b, end + 1) <= t <= last_use.get(b, -1)
        )
        total = sum(n for _, n in live)
        if total > peak:
            peak, peak_live = total, live
    return peak, peak_live


def estimate(
    graph: Graph,
    layout: ComputationLayout,
    mesh: Mesh,
    profile: HardwareProfile | None = None,
    outputs: Sequence[str] | None = None,
) -> CostReport:
    """Static cost report for one layout; raises IllegalLayout if invalid."""
    lowered = lower(graph, layout, mesh, outputs)
    kept = set(lowered.kept_nodes)
    flops_by_node = []
    for node in graph.nodes:
        if node.id in kept and node.kind == KIND_EINSUM:
            flops_by_node.append((node.id, _einsum_flops(graph, node, layout, mesh)))
    flops = sum(n for _, n in flops_by_node)

    comm = comm_summary(lowered)
    comm_total = sum(n for kinds in comm.values() for n in kinds.values())
    peak, peak_live = _peak_memory(lowered)

    if flops > 0:
        ratio = comm_total / flops
    else:
        ratio = 0.0 if comm_total == 0 else float("inf")

    compute_seconds = comm_seconds = None
    if profile is not None:
        compute_seconds = flops * profile.seconds_per_flop
        comm_seconds = comm_total * profile.seconds_per_element

    return CostReport(
        flops_per_processor=flops,
        flops_by_node=tuple(flops_by_node),
        comm_elements=tuple(
            (m, tuple(sorted(kinds.items()))) for m, kinds in sorted(comm.items())
        ),
        comm_elements_total=comm_total,
        peak_memory_elements=peak,
        peak_live_buffers=peak_live,
        ratio=ratio,
        compute_seconds=compute_seconds,
        comm_seconds=comm_seconds,
    )


@dataclass(frozen=True)
class RankedLayout:
    layout: ComputationLayout
    report: CostReport
    flags: tuple[str, ...]


def inefficiency_flags(graph: Graph, layout: ComputationLayout, mesh: Mesh) -> tuple[str, ...]:
    """Warn when a mesh dimension splits no dimension of some einsum: that
    einsum's work is then replicated across the dimension instead of shared."""
    flags = []
    for node in graph.nodes:
        if node.kind != KIND_EINSUM:
            continue
        union = {d.name for d in _einsum_union(graph, node)}
        for m, size in mesh.dims:
            if size <= 1:
                continue
            if not any(layout.mesh_dim_for(n) == m for n in union):
                flags.append(
                    f"mesh dim {m!r} splits no dimension of einsum {node.id!r}"
                )
    return tuple(flags)


def rank_layouts(
    graph: Graph,
    mesh: Mesh,
    candidates: Sequence[ComputationLayout],
    profile: HardwareProfile | None = None,
    outputs: Sequence[str] | None = None,
) -> list[RankedLayout]:
    """Candidates sorted ascending by comm/compute ratio, then peak memory,
    then layout rules; each entry carries its inefficiency flags."""
    ranked = [
        RankedLayout(
            layout,
            estimate(graph, layout, mesh, profile, outputs),
            inefficiency_flags(graph, layout, mesh),
        )
        for layout in candidates
    ]
    ranked.sort(key=lambda r: (r.report.ratio, r.report.peak_memory_elements, r.layout.rules))
    return ranked
