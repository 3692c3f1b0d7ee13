"""Discrete-event execution of schedule programs with overlap modeling.

Each rank owns one compute stream and one comm stream. An item starts when
its dependencies are done and its stream is idle; among simultaneously
startable items the lowest program index wins (bit-deterministic). Send and
recv rendezvous: the transfer begins when both sides are startable and
occupies both comm streams; collectives complete simultaneously on all
group members (bulk-synchronous, priced for the full group).

Overlap handling is a post-pass: ratio-based slowdown stretches the
overlapped portions of compute/comm segments to a fixpoint, and the
bandwidth-aware model re-prices communication from per-link transfer
decompositions under equal-share link contention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .collectives import CollectiveCost, send_recv_cost
from .engines import EngineStack
from .hardware import HardwareSpec
from .ir import GraphError
from .schedules import DeadlockError, ScheduleItem, ScheduleProgram


@dataclass
class SlowdownFactors:
    compute: float = 1.0  # compute stretched while comm is active
    comm: float = 1.0  # comm stretched while compute is active
    comm_comm: float = 1.0  # concurrent same-rank transfers (ratio model)

    def __post_init__(self):
        if min(self.compute, self.comm, self.comm_comm) < 1.0:
            raise ValueError("slowdown factors must be >= 1")


@dataclass
class Segment:
    item: ScheduleItem
    start_ns: float
    end_ns: float
    engine: str
    slowdown: float = 1.0

    @property
    def duration_ns(self) -> float:
        return self.end_ns - self.start_ns


@dataclass
class Timeline:
    segments: list[Segment]
    n_ranks: int
    ratio_iterations: int = 0

    @property
    def makespan_ns(self) -> float:
        return max((s.end_ns for s in self.segments), default=0.0)

    def rank_stream(self, rank: int, stream: str) -> list[Segment]:
        return [
            s for s in self.segments if s.item.rank == rank and s.item.stream == stream
        ]

    def busy_ns(self, rank: int, stream: str | None = None) -> float:
        return sum(
            s.duration_ns
            for s in self.segments
            if s.item.rank == rank and (stream is None or s.item.stream == stream)
        )

    def bubble_fraction(self) -> float:
        span = self.makespan_ns
        if span == 0:
            return 0.0
        busy = sum(self.busy_ns(r, "compute") for r in range(self.n_ranks))
        return 1.0 - busy / (span * self.n_ranks)


def _price(
    item: ScheduleItem, stack: EngineStack, hw: HardwareSpec
) -> tuple[float, str, CollectiveCost | None]:
    """Base duration in ns plus the engine name and comm decomposition."""
    if item.kind in ("send", "recv"):
        cost = send_recv_cost(item.payload_bytes, item.src, item.dst, hw)
        return cost.seconds * 1e9, "analytical", cost
    node = item.graph.node(item.node_id)
    seconds, engine, detail = stack.dispatch_detailed(item.graph, node)
    return seconds * 1e9, engine, detail


def simulate(
    program: ScheduleProgram,
    stack: EngineStack,
    hw: HardwareSpec,
    factors: SlowdownFactors | None = None,
    overlap: str = "ratio",  # "ratio" | "bandwidth" | "none"
) -> Timeline:
    """Execute the program and apply the selected overlap model."""
    program.validate()
    priced = [_price(it, stack, hw) for it in program.items]
    durations = [p[0] for p in priced]
    timeline = _layout(program, durations, priced)
    if overlap == "bandwidth":
        timeline = apply_bandwidth_contention(timeline, hw, program, priced)
        if factors is not None and (factors.compute > 1 or factors.comm > 1):
            timeline = apply_ratio_slowdown(
                timeline, replace(factors, comm_comm=1.0), program, priced
            )
    elif overlap == "ratio" and factors is not None:
        timeline = apply_ratio_slowdown(timeline, factors, program, priced)
    return timeline


def _layout(
    program: ScheduleProgram,
    durations: list[float],
    priced,
    rendezvous_shared: bool = True,
) -> Timeline:
    """Dependency- and resource-constrained layout of item durations."""
    items = program.items
    n = len(items)
    dep_count = [len(it.deps) for it in items]
    dependents: list[list[int]] = [[] for _ in range(n)]
    for it in items:
        for d in it.deps:
            dependents[d].append(it.index)

    ready_at = [0.0] * n  # max dep completion time
    started = [False] * n
    finished = [False] * n
    stream_free: dict[tuple[int, str], float] = {}
    pair_of: dict[int, int] = {}
    by_rendezvous: dict[int, list[int]] = {}
    for it in items:
        if it.rendezvous >= 0:
            by_rendezvous.setdefault(it.rendezvous, []).append(it.index)
    for rid, members in by_rendezvous.items():
        if len(members) == 2:
            pair_of[members[0]] = members[1]
            pair_of[members[1]] = members[0]

    segments: list[Segment] = [None] * n  # type: ignore[list-item]
    pending = set(range(n))
    running: list[tuple[float, int]] = []
    time = 0.0

    def startable(i: int, now: float) -> bool:
        it = items[i]
        if started[i] or dep_count[i] > 0 or ready_at[i] > now:
            return False
        if stream_free.get((it.rank, it.stream), 0.0) > now:
            return False
        return True

    def start(i: int, now: float) -> None:
        it = items[i]
        dur = durations[i]
        started[i] = True
        pending.discard(i)
        segments[i] = Segment(it, now, now + dur, priced[i][1])
        stream_free[(it.rank, it.stream)] = now + dur
        running.append((now + dur, i))

    while pending or running:
        progressed = True
        while progressed:
            progressed = False
            for i in sorted(pending):
                if started[i]:
                    continue
                it = items[i]
                if it.rendezvous >= 0 and i in pair_of:
                    j = pair_of[i]
                    if i > j:
                        continue  # handled from the lower-index side
                    if startable(i, time) and startable(j, time):
                        start(i, time)
                        start(j, time)
                        progressed = True
                elif it.rendezvous >= 0:
                    # unmatched send/recv never starts; caught below
                    continue
                else:
                    if startable(i, time):
                        start(i, time)
                        progressed = True
        if not running:
            if pending:
                waiting = [items[i] for i in sorted(pending)][:8]
                desc = ", ".join(
                    f"{w.label}(rank {w.rank}, deps {[d for d in w.deps if not finished[d]]}"
                    + (", unmatched transfer" if w.rendezvous >= 0 and w.index not in pair_of else "")
                    + ")"
                    for w in waiting
                )
                raise DeadlockError(f"no runnable items; waiting: {desc}")
            break
        running.sort()
        end, idx = running.pop(0)
        time = max(time, end)
        finished[idx] = True
        for j in dependents[idx]:
            dep_count[j] -= 1
            ready_at[j] = max(ready_at[j], end)
        # release items that tied on this completion time as well
        while running and running[0][0] <= time:
            _, idx2 = running.pop(0)
            finished[idx2] = True
            for j in dependents[idx2]:
                dep_count[j] -= 1
                ready_at[j] = max(ready_at[j], time)

    ordered = [s for s in segments if s is not None]
    return Timeline(ordered, program.n_ranks)


# ---------------------------------------------------------------------------
# Interval helpers
# ---------------------------------------------------------------------------


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def _overlap_len(a: tuple[float, float], merged: list[tuple[float, float]]) -> float:
    total = 0.0
    for lo, hi in merged:
        total += max(0.0, min(a[1], hi) - max(a[0], lo))
    return total


# ---------------------------------------------------------------------------
# Ratio-based slowdown
# ---------------------------------------------------------------------------


def apply_ratio_slowdown(
    timeline: Timeline,
    factors: SlowdownFactors,
    program: ScheduleProgram,
    priced,
    max_iterations: int = 10,
    tolerance_ns: float = 1.0,
) -> Timeline:
    """Stretch the overlapped portions of compute and comm segments.

    The stretch changes segment extents, which changes overlaps, so the rule
    iterates to a fixpoint: durations never shrink and are bounded by the
    fully-overlapped stretch, so the iteration is monotone.
    """
    if factors.compute == factors.comm == factors.comm_comm == 1.0:
        timeline.ratio_iterations = 0
        return timeline
    base = {s.item.index: s.duration_ns for s in timeline.segments}
    durations = dict(base)
    current = timeline
    iterations = 0
    for _ in range(max_iterations):
        iterations += 1
        new_durations = dict(base)
        for rank in range(timeline.n_ranks):
            comp = [ (s.start_ns, s.end_ns) for s in current.rank_stream(rank, "compute")]
            comm = [(s.start_ns, s.end_ns) for s in current.rank_stream(rank, "comm")]
            comp_m, comm_m = _merge(comp), _merge(comm)
            for s in current.segments:
                if s.item.rank != rank:
                    continue
                i = s.item.index
                if s.item.stream == "compute" and factors.compute > 1.0:
                    ov = _overlap_len((s.start_ns, s.end_ns), comm_m)
                    new_durations[i] = base[i] + (factors.compute - 1.0) * ov
                elif s.item.stream == "comm" and factors.comm > 1.0:
                    ov = _overlap_len((s.start_ns, s.end_ns), comp_m)
                    new_durations[i] = base[i] + (factors.comm - 1.0) * ov
        change = max(
            abs(new_durations[i] - durations[i]) for i in durations
        ) if durations else 0.0
        durations = new_durations
        dur_list = [durations[it.index] for it in program.items]
        current = _layout(program, dur_list, priced)
        for seg in current.segments:
            b = base[seg.item.index]
            if b > 0:
                seg.slowdown = seg.duration_ns / b
        if change < tolerance_ns:
            break
    current.ratio_iterations = iterations
    return current


def exposed_comm(timeline: Timeline) -> dict[int, float]:
    """Per rank: comm-stream busy time not hidden under compute, in ns."""
    out: dict[int, float] = {}
    for rank in range(timeline.n_ranks):
        comp_m = _merge(
            [(s.start_ns, s.end_ns) for s in timeline.rank_stream(rank, "compute")]
        )
        exposed = 0.0
        for s in timeline.rank_stream(rank, "comm"):
            exposed += s.duration_ns - _overlap_len((s.start_ns, s.end_ns), comp_m)
        out[rank] = exposed
    return out


# ---------------------------------------------------------------------------
# Bandwidth-aware contention
# ---------------------------------------------------------------------------


@dataclass
class Transfer:
    key: str  # physical link
    bytes: float
    start: float
    owner: int  # item index
    remaining: float = field(init=False)
    finish: float = field(init=False, default=0.0)
    drained: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.remaining = float(self.bytes)


def integrate_contention(
    transfers: list[Transfer], bandwidth: dict[str, float]
) -> None:
    """Progress-based integration: each link's bandwidth splits equally
    among its active transfers; completion events re-partition shares.

    Work conservation is exact up to float error: every event advances each
    active transfer by share * dt and the final event drains the remainder.
    """
    if not transfers:
        return
    pending = sorted(transfers, key=lambda t: (t.start, t.owner))
    active: list[Transfer] = []
    time = pending[0].start

    def rates() -> dict[int, float]:
        by_link: dict[str, int] = {}
        for t in active:
            by_link[t.key] = by_link.get(t.key, 0) + 1
        return {
            id(t): bandwidth[t.key] / by_link[t.key] for t in active
        }

    while pending or active:
        while pending and pending[0].start <= time + 1e-12:
            active.append(pending.pop(0))
        if not active:
            time = pending[0].start
            continue
        r = rates()
        horizon = pending[0].start if pending else math.inf
        finish_candidates = [
            time + t.remaining / r[id(t)] for t in active if r[id(t)] > 0
        ]
        next_event = min(finish_candidates + [horizon])
        dt = next_event - time
        for t in active:
            drain = min(r[id(t)] * dt, t.remaining)
            t.remaining -= drain
            t.drained += drain
        time = next_event
        # sub-ulp residues cannot advance time; byte-scaled epsilon keeps
        # conservation well within a byte and guarantees progress
        done = [
            t for t in active if t.remaining <= max(1e-9, 1e-12 * t.bytes)
        ]
        if not done and dt <= 0.0 and next_event < horizon:
            done = [min(active, key=lambda t: t.remaining)]
        for t in done:
            t.remaining = 0.0
            t.drained = t.bytes  # close out float residue exactly
            t.finish = time
            active.remove(t)


def apply_bandwidth_contention(
    timeline: Timeline,
    hw: HardwareSpec,
    program: ScheduleProgram,
    priced,
) -> Timeline:
    """Re-price communication under link sharing, then re-layout.

    Uses the analytical per-link decompositions captured at pricing time;
    comm segments without one (profile-engine hits) keep their duration.
    """
    details: dict[int, CollectiveCost] = {
        it.index: priced[it.index][2]
        for it in program.items
        if priced[it.index][2] is not None
    }
    bandwidth: dict[str, float] = {}
    transfers: list[Transfer] = []
    for seg in timeline.segments:
        det = details.get(seg.item.index)
        if det is None or not det.transfers:
            continue
        t0 = seg.start_ns + det.fixed_s * 1e9
        for key, nbytes in det.transfers:
            tier_id = key.split(":", 1)[0]
            bw = _tier_bandwidth(hw, tier_id)
            bandwidth[key] = bw
            transfers.append(Transfer(key, nbytes, t0, seg.item.index))

    integrate_contention(transfers, {k: v / 1e9 for k, v in bandwidth.items()})

    finish_by_item: dict[int, float] = {}
    for t in transfers:
        finish_by_item[t.owner] = max(finish_by_item.get(t.owner, 0.0), t.finish)

    new_durations: list[float] = []
    for it in program.items:
        seg = next(s for s in timeline.segments if s.item.index == it.index)
        if it.index in finish_by_item:
            det = details[it.index]
            new_durations.append(
                (finish_by_item[it.index] - seg.start_ns)
            )
        else:
            new_durations.append(seg.duration_ns)
    out = _layout(program, new_durations, priced)
    for seg in out.segments:
        seg.slowdown = 1.0
    return out


def _tier_bandwidth(hw: HardwareSpec, tier_id: str) -> float:
    idx = int(tier_id.lstrip("t"))
    if 0 <= idx < len(hw.topology):
        return hw.topology[idx].bandwidth
    raise GraphError(f"unknown tier id {tier_id!r}")
