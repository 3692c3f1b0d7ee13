"""Schedule programs: per-rank, per-stream item lists with explicit deps.

A ScheduleProgram is the unit the discrete-event simulator executes. Items
reference graph nodes (compute or collective) or are bare send/recv
transfers; dependencies carry both dataflow (producer -> consumer within a
microbatch, saved activations into backward) and schedule order (the 1F1B
interleaving is encoded as explicit compute-stream order edges).

Send/recv pairs share a rendezvous id: the transfer starts when both sides
are ready and occupies both comm streams for its duration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ir import (
    COMM_KINDS,
    ConfigError,
    GraphError,
    OperatorGraph,
    OpKind,
    Phase,
    TensorRole,
)
from .parallel import ParallelismConfig


class DeadlockError(GraphError):
    """The program cannot make progress; lists the waiting items."""


@dataclass
class ScheduleItem:
    index: int
    rank: int
    stream: str  # "compute" | "comm"
    kind: str  # "compute" | comm kind value | "send" | "recv"
    label: str
    deps: list[int] = field(default_factory=list)
    graph: OperatorGraph | None = None
    node_id: str | None = None
    payload_bytes: int = 0
    rendezvous: int = -1  # send/recv pairing id, -1 for none
    src: int = -1
    dst: int = -1
    microbatch: int = 0
    phase: str = "forward"


@dataclass
class ScheduleProgram:
    items: list[ScheduleItem]
    n_ranks: int

    def validate(self) -> None:
        """Dependency edges must be acyclic and send/recv pairing a bijection."""
        pairs: dict[int, list[ScheduleItem]] = {}
        for it in self.items:
            if it.rendezvous >= 0:
                pairs.setdefault(it.rendezvous, []).append(it)
        for rid, members in pairs.items():
            kinds = sorted(m.kind for m in members)
            if kinds != ["recv", "send"]:
                labels = [m.label for m in members]
                raise DeadlockError(
                    f"unmatched transfer: rendezvous {rid} has {labels}, "
                    "needs one send and one recv"
                )
        # deps reference earlier-constructed items; detect cycles anyway
        indeg = {it.index: 0 for it in self.items}
        out: dict[int, list[int]] = {it.index: [] for it in self.items}
        for it in self.items:
            for d in it.deps:
                if d not in indeg:
                    raise GraphError(f"item {it.index} depends on unknown item {d}")
                out[d].append(it.index)
                indeg[it.index] += 1
        ready = [i for i, d in indeg.items() if d == 0]
        seen = 0
        while ready:
            i = ready.pop()
            seen += 1
            for j in out[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        if seen != len(self.items):
            stuck = [i for i, d in indeg.items() if d > 0][:8]
            raise GraphError(f"schedule dependency cycle among items {stuck}")


class _Builder:
    def __init__(self, n_ranks: int):
        self.items: list[ScheduleItem] = []
        self.n_ranks = n_ranks
        self._rendezvous = 0

    def add(self, **kw) -> ScheduleItem:
        item = ScheduleItem(index=len(self.items), **kw)
        self.items.append(item)
        return item

    def send_recv(
        self, src: int, dst: int, payload: int, label: str, send_deps: list[int],
        microbatch: int, phase: str,
    ) -> tuple[ScheduleItem, ScheduleItem]:
        rid = self._rendezvous
        self._rendezvous += 1
        s = self.add(
            rank=src, stream="comm", kind="send", label=f"send_{label}",
            deps=list(send_deps), payload_bytes=payload, rendezvous=rid,
            src=src, dst=dst, microbatch=microbatch, phase=phase,
        )
        r = self.add(
            rank=dst, stream="comm", kind="recv", label=f"recv_{label}",
            deps=[], payload_bytes=payload, rendezvous=rid,
            src=src, dst=dst, microbatch=microbatch, phase=phase,
        )
        return s, r

    def program(self) -> ScheduleProgram:
        p = ScheduleProgram(self.items, self.n_ranks)
        p.validate()
        return p


def _activation_input(g: OperatorGraph) -> str | None:
    for name, t in g.graph_inputs.items():
        if t.role == TensorRole.ACTIVATION:
            return name
    return None


def _grad_of_input(g: OperatorGraph, name: str) -> str | None:
    from .backward import find_grad_ref

    return find_grad_ref(g, name)


def _emit_graph_pass(
    b: _Builder,
    g: OperatorGraph,
    rank: int,
    phase: Phase,
    microbatch: int,
    layer: int,
    ref_items: dict[str, int],
    entry_dep: int | None,
    seed_dep: int | None,
    prev_compute: int | None,
) -> tuple[int | None, dict[str, int]]:
    """Append items for one phase of one layer; returns last compute index.

    ref_items maps value refs to producing item indices (shared between the
    forward and backward passes of the same microbatch and layer).
    """
    x_name = _activation_input(g)
    last_compute = prev_compute
    for n in g.nodes:
        if n.phase != phase:
            continue
        deps: list[int] = []
        for ref in n.inputs:
            if ref in ref_items:
                deps.append(ref_items[ref])
            elif ref == x_name and entry_dep is not None:
                deps.append(entry_dep)
            elif (
                seed_dep is not None
                and ref in g.graph_inputs
                and g.graph_inputs[ref].role == TensorRole.GRADIENT
            ):
                deps.append(seed_dep)
        if n.kind in COMM_KINDS:
            item = b.add(
                rank=rank, stream="comm", kind=n.kind.value,
                label=f"{n.id}@L{layer}", deps=sorted(set(deps)), graph=g,
                node_id=n.id, microbatch=microbatch, phase=phase.value,
            )
        else:
            if last_compute is not None:
                deps.append(last_compute)
            item = b.add(
                rank=rank, stream="compute", kind="compute",
                label=f"{n.id}@L{layer}", deps=sorted(set(deps)), graph=g,
                node_id=n.id, microbatch=microbatch, phase=phase.value,
            )
            last_compute = item.index
        for k in range(len(n.outputs)):
            ref_items[n.output_ref(k)] = item.index
    return last_compute, ref_items


def _emit_microbatch_phase(
    b: _Builder,
    g: OperatorGraph,
    rank: int,
    phase: Phase,
    microbatch: int,
    layers: int,
    layer_refs: dict[int, dict[str, int]],
    entry_dep: int | None,
    prev_compute: int | None,
) -> tuple[int | None, int | None]:
    """All layers of one phase; returns (last compute item, boundary item).

    Forward walks layers 0..L-1 chaining activations; backward walks them in
    reverse chaining input gradients. The boundary item produces the value
    crossing the stage boundary (last activation or first layer's dX).
    """
    x_name = _activation_input(g)
    boundary: int | None = None
    last_compute = prev_compute
    if phase == Phase.FORWARD:
        carry = entry_dep
        for layer in range(layers):
            refs = layer_refs.setdefault(layer, {})
            last_compute, refs = _emit_graph_pass(
                b, g, rank, phase, microbatch, layer, refs, carry, None, last_compute
            )
            out_ref = g.graph_outputs[0]
            carry = refs.get(out_ref, carry)
        boundary = carry if isinstance(carry, int) else None
    else:
        grad_x_ref = _grad_of_input(g, x_name) if x_name else None
        carry = entry_dep
        for layer in range(layers - 1, -1, -1):
            refs = layer_refs.setdefault(layer, {})
            last_compute, refs = _emit_graph_pass(
                b, g, rank, phase, microbatch, layer, refs, None, carry, last_compute
            )
            if grad_x_ref is not None and grad_x_ref in refs:
                carry = refs[grad_x_ref]
        boundary = carry if isinstance(carry, int) else None
    return last_compute, boundary


def _boundary_bytes(g: OperatorGraph) -> int:
    return g.resolve(g.graph_outputs[0]).bytes


def _one_f_one_b_order(stage: int, pp: int, m: int) -> list[tuple[str, int]]:
    """Classic 1F1B: warmup forwards, steady 1B1F pairs, drain backwards."""
    warmup = min(pp - stage, m)
    seq: list[tuple[str, int]] = [("F", i) for i in range(warmup)]
    for i in range(m - warmup):
        seq.append(("B", i))
        seq.append(("F", warmup + i))
    for i in range(m - warmup, m):
        seq.append(("B", i))
    return seq


def build_pp_schedule(
    stage_graphs: list[OperatorGraph],
    cfg: ParallelismConfig,
    with_backward: bool | None = None,
) -> ScheduleProgram:
    """Construct the per-rank program for one training or inference step."""
    pp = len(stage_graphs)
    m = cfg.microbatches
    if with_backward is None:
        with_backward = any(
            n.phase == Phase.BACKWARD for g in stage_graphs for n in g.nodes
        )
    # the 1F1B floor binds training pipelines; forward-only flows stream
    if with_backward and cfg.pp_schedule == "one_f_one_b" and m < pp:
        raise ConfigError(
            f"one_f_one_b needs microbatches >= pp ({m} < {pp})"
        )
    if cfg.pp_schedule == "dualpipe" and pp % 2 != 0:
        raise ConfigError("dualpipe needs an even stage count")

    if cfg.pp_schedule == "dualpipe" and pp > 1:
        return _build_dualpipe(stage_graphs, m, with_backward)

    b = _Builder(pp)
    layers = [max(g.block_multiplier, 1) for g in stage_graphs]
    # bookkeeping handles: [stage][mb] -> item index
    fwd_boundary: dict[tuple[int, int], int] = {}
    bwd_boundary: dict[tuple[int, int], int] = {}
    fwd_recv: dict[tuple[int, int], ScheduleItem] = {}
    bwd_recv: dict[tuple[int, int], ScheduleItem] = {}
    layer_refs: dict[tuple[int, int], dict[int, dict[str, int]]] = {}

    orders = {
        s: (_one_f_one_b_order(s, pp, m) if with_backward else [("F", i) for i in range(m)])
        for s in range(pp)
    }
    cursors = {s: 0 for s in range(pp)}
    last_compute: dict[int, int | None] = {s: None for s in range(pp)}
    done = 0
    total = sum(len(v) for v in orders.values())
    # emit stage-by-stage in rounds so recv items exist before their senders
    while done < total:
        progressed = False
        for s in range(pp):
            while cursors[s] < len(orders[s]):
                kind, mb = orders[s][cursors[s]]
                g = stage_graphs[s]
                if kind == "F":
                    entry = None
                    if s > 0:
                        if (s, mb) not in fwd_recv:
                            break  # upstream has not sent yet
                        entry = fwd_recv[(s, mb)].index
                    refs = layer_refs.setdefault((s, mb), {})
                    lc, boundary = _emit_microbatch_phase(
                        b, g, s, Phase.FORWARD, mb, layers[s], refs, entry,
                        last_compute[s],
                    )
                    last_compute[s] = lc
                    fwd_boundary[(s, mb)] = boundary if boundary is not None else lc
                    if s < pp - 1:
                        snd, rcv = b.send_recv(
                            s, s + 1, _boundary_bytes(g), f"act_mb{mb}_s{s}",
                            [fwd_boundary[(s, mb)]], mb, "forward",
                        )
                        fwd_recv[(s + 1, mb)] = rcv
                else:
                    entry = None
                    if s < pp - 1:
                        if (s, mb) not in bwd_recv:
                            break
                        entry = bwd_recv[(s, mb)].index
                    refs = layer_refs.setdefault((s, mb), {})
                    lc, boundary = _emit_microbatch_phase(
                        b, g, s, Phase.BACKWARD, mb, layers[s], refs, entry,
                        last_compute[s],
                    )
                    last_compute[s] = lc
                    bwd_boundary[(s, mb)] = boundary if boundary is not None else lc
                    if s > 0:
                        snd, rcv = b.send_recv(
                            s, s - 1, _boundary_bytes(g), f"grad_mb{mb}_s{s}",
                            [bwd_boundary[(s, mb)]], mb, "backward",
                        )
                        bwd_recv[(s - 1, mb)] = rcv
                cursors[s] += 1
                done += 1
                progressed = True
        if not progressed:
            raise GraphError("pipeline schedule construction deadlocked")

    _emit_optimizer_comm(b, stage_graphs, layer_refs, m)
    return b.program()


def _emit_optimizer_comm(b: _Builder, stage_graphs, layer_refs, m) -> None:
    """Step-end gradient/parameter synchronization (DP collectives)."""
    for s, g in enumerate(stage_graphs):
        refs_last = layer_refs.get((s, m - 1), {})
        flat: dict[str, int] = {}
        for layer_map in refs_last.values():
            flat.update(layer_map)
        for n in g.nodes:
            if n.phase != Phase.OPTIMIZER:
                continue
            deps = sorted({flat[r] for r in n.inputs if r in flat})
            b.add(
                rank=s, stream="comm", kind=n.kind.value, label=n.id,
                deps=deps, graph=g, node_id=n.id, microbatch=m - 1,
                phase="optimizer",
            )


def _build_dualpipe(stage_graphs, m, with_backward) -> ScheduleProgram:
    """Bidirectional schedule: two stage chains share each rank.

    Direction A maps stage s to rank s, direction B to rank pp-1-s; each
    direction runs its own 1F1B over half the microbatches, and send/recv
    overlaps the other direction's compute on the shared rank.
    """
    pp = len(stage_graphs)
    m_a = (m + 1) // 2
    m_b = m - m_a

    b = _Builder(pp)
    layers = [max(g.block_multiplier, 1) for g in stage_graphs]
    dirs = [("A", m_a, lambda s: s), ("B", m_b, lambda s: pp - 1 - s)]

    fwd_recv: dict[tuple[str, int, int], ScheduleItem] = {}
    bwd_recv: dict[tuple[str, int, int], ScheduleItem] = {}
    layer_refs: dict[tuple[str, int, int], dict] = {}
    last_compute: dict[tuple[str, int], int | None] = {
        (d, s): None for d, _, _ in dirs for s in range(pp)
    }

    orders = {}
    for d, md, rank_of in dirs:
        for s in range(pp):
            if md > 0:
                orders[(d, s)] = (
                    _one_f_one_b_order(s, pp, md)
                    if with_backward
                    else [("F", i) for i in range(md)]
                )
            else:
                orders[(d, s)] = []
    cursors = {k: 0 for k in orders}
    total = sum(len(v) for v in orders.values())
    done = 0
    while done < total:
        progressed = False
        for d, md, rank_of in dirs:
            for s in range(pp):
                key = (d, s)
                while cursors[key] < len(orders[key]):
                    kind, mb = orders[key][cursors[key]]
                    g = stage_graphs[s]
                    rank = rank_of(s)
                    if kind == "F":
                        entry = None
                        if s > 0:
                            if (d, s, mb) not in fwd_recv:
                                break
                            entry = fwd_recv[(d, s, mb)].index
                        refs = layer_refs.setdefault((d, s, mb), {})
                        lc, boundary = _emit_microbatch_phase(
                            b, g, rank, Phase.FORWARD, mb, layers[s], refs,
                            entry, last_compute[(d, s)],
                        )
                        last_compute[(d, s)] = lc
                        if s < pp - 1:
                            snd, rcv = b.send_recv(
                                rank, rank_of(s + 1), _boundary_bytes(g),
                                f"{d}_act_mb{mb}_s{s}", [boundary if boundary is not None else lc],
                                mb, "forward",
                            )
                            fwd_recv[(d, s + 1, mb)] = rcv
                    else:
                        entry = None
                        if s < pp - 1:
                            if (d, s, mb) not in bwd_recv:
                                break
                            entry = bwd_recv[(d, s, mb)].index
                        refs = layer_refs.setdefault((d, s, mb), {})
                        lc, boundary = _emit_microbatch_phase(
                            b, g, rank, Phase.BACKWARD, mb, layers[s], refs,
                            entry, last_compute[(d, s)],
                        )
                        last_compute[(d, s)] = lc
                        if s > 0:
                            snd, rcv = b.send_recv(
                                rank, rank_of(s - 1), _boundary_bytes(g),
                                f"{d}_grad_mb{mb}_s{s}", [boundary if boundary is not None else lc],
                                mb, "backward",
                            )
                            bwd_recv[(d, s - 1, mb)] = rcv
                    cursors[key] += 1
                    done += 1
                    progressed = True
        if not progressed:
            raise GraphError("dualpipe schedule construction deadlocked")

    return b.program()


def split_stages(
    g: OperatorGraph, pp: int, assignment: list[int] | None = None
) -> list[OperatorGraph]:
    """Uniform layer partition (remainder to early stages) or explicit list."""
    layers = g.block_multiplier
    if assignment is None:
        base, rem = divmod(layers, pp)
        assignment = [base + (1 if s < rem else 0) for s in range(pp)]
    if len(assignment) != pp or sum(assignment) != layers or any(a < 1 for a in assignment):
        raise ConfigError(
            f"stage assignment {assignment} does not partition {layers} layers over {pp} stages"
        )
    out = []
    for s in range(pp):
        out.append(
            OperatorGraph(
                g.nodes, dict(g.graph_inputs), list(g.graph_outputs), assignment[s]
            )
        )
    return out
