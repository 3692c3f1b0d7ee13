"""Metric passes over graphs and timelines.

Dependency-independent metrics (FLOPs, MFU, memory liveness) walk graphs;
dependency-aware metrics (breakdown, exposed comm, traces) walk the
simulated timeline. FLOPs are taken on the pre-recompute graph, so a
recompute pass changes executed work but never reported model FLOPs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .hardware import HardwareSpec
from .ir import (
    COMM_KINDS,
    GraphError,
    OperatorGraph,
    OpKind,
    Phase,
    Precision,
    TensorRole,
)
from .parallel import ShardingTags
from .scheduler import Timeline, exposed_comm

REPORT_VERSION = "charon-report/1"

# Adam-style optimizer: two FP32 state tensors per parameter
OPTIMIZER_STATE_BYTES_PER_PARAM = 8
DEFAULT_FRAGMENTATION = 1.05


def flops_summary(
    g: OperatorGraph,
    timeline: Timeline,
    hw: HardwareSpec,
    world: int,
    precision: Precision,
    microbatches: int = 1,
    extra_flops: int = 0,
) -> tuple[int, float]:
    """(model FLOPs, MFU) for one step covering `microbatches` traversals."""
    model = g.model_flops() * g.block_multiplier * microbatches + extra_flops
    span_s = timeline.makespan_ns / 1e9
    if span_s <= 0:
        raise GraphError("timeline has zero makespan")
    mfu = model / (span_s * hw.peak(precision) * world)
    return model, mfu


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

_COMPONENTS = (
    "weights",
    "gradients",
    "optimizer_states",
    "activations",
    "temporaries",
    "comm_buffers",
    "kv_cache",
)


@dataclass
class MemoryTimeline:
    curve: list[int]  # allocated bytes after each execution step
    component_peaks: dict[str, int]
    max_allocated: int
    max_reserved: int
    persistent: int

    @property
    def peak_activation_bytes(self) -> int:
        return self.component_peaks.get("activations", 0)


@dataclass
class MemoryCalibration:
    fragmentation: float = DEFAULT_FRAGMENTATION
    comm_buffer_bytes: int = 0


def _component(role: TensorRole) -> str:
    return {
        TensorRole.WEIGHT: "weights",
        TensorRole.GRADIENT: "gradients",
        TensorRole.OPTIMIZER_STATE: "optimizer_states",
        TensorRole.ACTIVATION: "activations",
        TensorRole.KV_CACHE: "kv_cache",
        TensorRole.BUFFER: "temporaries",
    }[role]


def memory_timeline(
    g: OperatorGraph,
    tags: ShardingTags | None = None,
    calib: MemoryCalibration | None = None,
    optimizer_states: bool | None = None,
) -> MemoryTimeline:
    """Liveness walk in execution order.

    A tensor is allocated at its producer and freed after its last consumer;
    weights, kv caches and produced gradients persist. ZeRO/FSDP sharding
    multipliers from the DP pass scale the persistent components.
    """
    tags = tags or ShardingTags()
    calib = calib or MemoryCalibration()
    if optimizer_states is None:
        optimizer_states = any(n.phase != Phase.FORWARD for n in g.nodes)

    mult = {
        "weights": tags.param_mult,
        "gradients": tags.grad_mult,
        "optimizer_states": tags.opt_mult,
    }

    def scaled(component: str, nbytes: int) -> int:
        return int(round(nbytes * mult.get(component, 1.0)))

    persistent_by: dict[str, int] = {c: 0 for c in _COMPONENTS}
    for name, t in g.graph_inputs.items():
        if t.role in (TensorRole.WEIGHT, TensorRole.KV_CACHE, TensorRole.OPTIMIZER_STATE):
            persistent_by[_component(t.role)] += scaled(_component(t.role), t.bytes)
    if optimizer_states:
        params = g.weight_params()
        persistent_by["optimizer_states"] += scaled(
            "optimizer_states", params * OPTIMIZER_STATE_BYTES_PER_PARAM
        )

    last_use: dict[str, int] = {}
    graph_outputs = set(g.graph_outputs)
    for i, n in enumerate(g.nodes):
        for ref in n.inputs:
            last_use[ref] = i
    n_steps = len(g.nodes)

    # per-step deltas; transient node outputs live producer -> last consumer,
    # transient graph inputs live from step 0 to their last consumer
    alloc_at: list[list[tuple[str, int]]] = [[] for _ in range(n_steps)]
    free_at: list[list[tuple[str, int]]] = [[] for _ in range(n_steps + 1)]
    live0: dict[str, int] = {c: 0 for c in _COMPONENTS}
    for name, t in g.graph_inputs.items():
        if t.role in (TensorRole.ACTIVATION, TensorRole.GRADIENT, TensorRole.BUFFER):
            comp = _component(t.role)
            nbytes = scaled(comp, t.bytes)
            live0[comp] += nbytes
            if name in last_use and name not in graph_outputs:
                free_at[last_use[name] + 1].append((comp, nbytes))
    for i, n in enumerate(g.nodes):
        for k, t in enumerate(n.outputs):
            ref = n.output_ref(k)
            comp = _component(t.role)
            nbytes = scaled(comp, t.bytes)
            alloc_at[i].append((comp, nbytes))
            persists = (
                t.role in (TensorRole.WEIGHT, TensorRole.GRADIENT, TensorRole.KV_CACHE)
                or ref in graph_outputs
            )
            if not persists:
                free_at[last_use.get(ref, i) + 1].append((comp, nbytes))

    live = {c: persistent_by[c] + live0[c] for c in _COMPONENTS}
    curve: list[int] = [sum(live.values())]
    component_peaks = dict(live)
    for i in range(n_steps):
        for comp, nbytes in alloc_at[i]:
            live[comp] += nbytes
        for comp in live:
            component_peaks[comp] = max(component_peaks[comp], live[comp])
        curve.append(sum(live.values()))
        for comp, nbytes in free_at[i + 1]:
            live[comp] -= nbytes

    max_alloc = max(curve)
    max_reserved = int(round(max_alloc * calib.fragmentation)) + calib.comm_buffer_bytes
    return MemoryTimeline(
        curve=curve,
        component_peaks=component_peaks,
        max_allocated=max_alloc,
        max_reserved=max_reserved,
        persistent=sum(persistent_by.values()),
    )


# ---------------------------------------------------------------------------
# Breakdown
# ---------------------------------------------------------------------------

DEFAULT_CATEGORIES = {
    "attention": "Attention",
    "ffn": "Feed-Forward",
    "others": "Others",
    "all_gather": "All-Gather",
    "reduce_scatter": "Reduce-Scatter",
    "all_reduce": "All-Reduce",
    "all_to_all": "All-to-All",
    "send": "Send/Recv",
    "recv": "Send/Recv",
}


def breakdown(
    timeline: Timeline, category_map: dict[str, str] | None = None
) -> dict[str, dict[str, float]]:
    """Per-category busy microseconds, split by phase column (F/B/...)."""
    cmap = dict(DEFAULT_CATEGORIES)
    if category_map:
        cmap.update(category_map)
    out: dict[str, dict[str, float]] = {}
    for seg in timeline.segments:
        item = seg.item
        if item.kind == "compute":
            node = item.graph.node(item.node_id)
            key = node.attrs.get("cat", "others")
        else:
            key = item.kind
        label = cmap.get(key, "Others")
        col = {"forward": "F", "backward": "B", "optimizer": "O"}.get(item.phase, "F")
        out.setdefault(label, {}).setdefault(col, 0.0)
        out[label][col] += seg.duration_ns / 1e3
    return out


def energy_estimate(timeline: Timeline, hw: HardwareSpec) -> float:
    """Joules: TDP x per-rank busy time (busy-power model, no idle draw)."""
    total_busy_s = sum(
        timeline.busy_ns(r) / 1e9 for r in range(timeline.n_ranks)
    )
    return hw.tdp * total_busy_s


# ---------------------------------------------------------------------------
# Chrome trace
# ---------------------------------------------------------------------------


def emit_chrome_trace(timeline: Timeline) -> dict:
    """Trace Event JSON: complete events, ts/dur in microseconds."""
    events = []
    for seg in sorted(
        timeline.segments, key=lambda s: (s.item.rank, s.item.stream, s.start_ns, s.item.index)
    ):
        events.append(
            {
                "name": seg.item.label,
                "ph": "X",
                "ts": seg.start_ns / 1e3,
                "dur": seg.duration_ns / 1e3,
                "pid": seg.item.rank,
                "tid": seg.item.stream,
                "args": {
                    "engine": seg.engine,
                    "kind": seg.item.kind,
                    "microbatch": seg.item.microbatch,
                    "phase": seg.item.phase,
                },
            }
        )
    return {"traceEvents": events}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class Report:
    model_flops: int
    mfu: float
    step_time_us: float
    breakdown_us: dict[str, dict[str, float]]
    exposed_comm_us: dict[int, float]
    max_allocated_bytes: int
    max_reserved_bytes: int
    energy_j: float
    operators: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "version": REPORT_VERSION,
            "model_flops": self.model_flops,
            "mfu": round(self.mfu, 6),
            "step_time_us": round(self.step_time_us, 3),
            "breakdown_us": {
                cat: {col: round(v, 3) for col, v in sorted(cols.items())}
                for cat, cols in sorted(self.breakdown_us.items())
            },
            "exposed_comm_us": {
                str(r): round(v, 3) for r, v in sorted(self.exposed_comm_us.items())
            },
            "memory": {
                "max_allocated_bytes": self.max_allocated_bytes,
                "max_reserved_bytes": self.max_reserved_bytes,
            },
            "energy_j": round(self.energy_j, 6),
            "operators": self.operators,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def build_report(
    g: OperatorGraph,
    timeline: Timeline,
    hw: HardwareSpec,
    world: int,
    precision: Precision,
    microbatches: int = 1,
    tags: ShardingTags | None = None,
    calib: MemoryCalibration | None = None,
    in_flight: int = 1,
    extra_flops: int = 0,
) -> Report:
    model_flops, mfu = flops_summary(
        g, timeline, hw, world, precision, microbatches, extra_flops
    )
    mem = memory_timeline(g, tags, calib)
    act_extra = (in_flight - 1) * mem.peak_activation_bytes
    per_op: dict[str, dict] = {}
    for seg in timeline.segments:
        entry = per_op.setdefault(
            seg.item.label.split("@")[0],
            {"name": seg.item.label.split("@")[0], "kind": seg.item.kind, "calls": 0, "total_us": 0.0, "engine": seg.engine},
        )
        entry["calls"] += 1
        entry["total_us"] = round(entry["total_us"] + seg.duration_ns / 1e3, 3)
    return Report(
        model_flops=model_flops,
        mfu=mfu,
        step_time_us=timeline.makespan_ns / 1e3,
        breakdown_us=breakdown(timeline),
        exposed_comm_us={r: v / 1e3 for r, v in exposed_comm(timeline).items()},
        max_allocated_bytes=mem.max_allocated + act_extra,
        max_reserved_bytes=mem.max_reserved + act_extra,
        energy_j=energy_estimate(timeline, hw),
        operators=sorted(per_op.values(), key=lambda e: (-e["total_us"], e["name"])),
    )
