"""Link-centric collective communication cost model.

Closed forms (p ranks, payload S bytes, per-hop latency alpha, per-link
bandwidth B):

    ring all_reduce       2(p-1) steps of (alpha + (S/p)/B)
    ring all_gather       (p-1) steps of (alpha + (S/p)/B)
    ring reduce_scatter   (p-1) steps of (alpha + (S/p)/B)
    tree all_reduce       2*ceil(log2 p) steps of (alpha + S/B)
    all_to_all (ring)     (p-1) steps of (alpha + (S/p)/B)
    all_to_all (switch)   alpha + (p-1)(S/p)/B  (shared-bandwidth division)
    send/recv             alpha + S/B

Any collective over one rank costs zero. Groups spanning an inner tier
decompose hierarchically for all_reduce (intra reduce_scatter, inter
all_reduce over tier leaders, intra all_gather); other spanning collectives
price on the parent tier. Each cost carries the per-link transfer
decomposition consumed by the bandwidth-contention model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hardware import HardwareSpec, LinkTier, TopologyError
from .ir import ConfigError


@dataclass
class CollectiveCost:
    seconds: float
    fixed_s: float = 0.0
    # (link key, bytes) pairs; duration = fixed_s + max(bytes / link bandwidth)
    transfers: list[tuple[str, float]] = field(default_factory=list)


def _ring_links(tid: int, ranks: list[int], bytes_per_link: float) -> list[tuple[str, float]]:
    p = len(ranks)
    return [
        (f"t{tid}:{ranks[i]}>{ranks[(i + 1) % p]}", bytes_per_link) for i in range(p)
    ]


def _member_links(tid: int, ranks: list[int], bytes_per_rank: float) -> list[tuple[str, float]]:
    return [(f"t{tid}:@{r}", bytes_per_rank) for r in ranks]


def _flat(kind: str, p: int, size: float, tier: LinkTier, tid: int, ranks: list[int], algo: str) -> CollectiveCost:
    alpha, bw = tier.alpha, tier.bandwidth
    if kind == "all_reduce" and algo == "tree":
        steps = 2 * math.ceil(math.log2(p))
        fixed = steps * alpha
        per_rank = steps * size
        return CollectiveCost(
            fixed + per_rank / bw, fixed, _member_links(tid, ranks, per_rank)
        )
    if kind == "all_reduce":
        steps = 2 * (p - 1)
    elif kind in ("all_gather", "reduce_scatter"):
        steps = p - 1
    elif kind == "all_to_all":
        if tier.kind == "switch":
            per_rank = (p - 1) * (size / p)
            return CollectiveCost(
                alpha + per_rank / bw, alpha, _member_links(tid, ranks, per_rank)
            )
        steps = p - 1
    else:
        raise ConfigError(f"unknown collective kind {kind!r}")
    fixed = steps * alpha
    per_link = steps * (size / p)
    links = (
        _ring_links(tid, ranks, per_link)
        if tier.kind == "ring"
        else _member_links(tid, ranks, per_link)
    )
    return CollectiveCost(fixed + per_link / bw, fixed, links)


def collective_cost(
    kind: str,
    size_bytes: float,
    ranks: list[int],
    hw: HardwareSpec,
    algo: str = "ring",
) -> CollectiveCost:
    """Price one collective over a rank group; returns link decomposition."""
    group = sorted(set(ranks))
    p = len(group)
    if p <= 1:
        return CollectiveCost(0.0)
    if not hw.topology:
        raise TopologyError("hardware spec declares no topology tiers")
    split = hw.split_hierarchical(group)
    if split is None:
        tier = hw.tier_for(group)
        return _flat(kind, p, size_bytes, tier, hw.topology.index(tier), group, algo)
    islands, leaf, parent = split
    leaf_id, parent_id = hw.topology.index(leaf), hw.topology.index(parent)
    leaders = [island[0] for island in islands]
    if kind == "all_reduce" and len(islands[0]) > 1:
        p1 = len(islands[0])
        rs = _flat("reduce_scatter", p1, size_bytes, leaf, leaf_id, islands[0], algo)
        inter = _flat("all_reduce", len(leaders), size_bytes / p1, parent, parent_id, leaders, algo)
        ag = _flat("all_gather", p1, size_bytes, leaf, leaf_id, islands[0], algo)
        total = rs.seconds + inter.seconds + ag.seconds
        fixed = rs.fixed_s + inter.fixed_s + ag.fixed_s
        transfers = rs.transfers + inter.transfers + ag.transfers
        return CollectiveCost(total, fixed, transfers)
    return _flat(kind, p, size_bytes, parent, parent_id, group, algo)


def send_recv_cost(size_bytes: float, src: int, dst: int, hw: HardwareSpec) -> CollectiveCost:
    if src == dst:
        return CollectiveCost(0.0)
    tier = hw.tier_for([src, dst])
    tid = hw.topology.index(tier)
    return CollectiveCost(
        tier.alpha + size_bytes / tier.bandwidth,
        tier.alpha,
        [(f"t{tid}:{src}>{dst}", size_bytes)],
    )


# ---------------------------------------------------------------------------
# Link calibration
# ---------------------------------------------------------------------------


def _coeffs(kind: str, algo: str, p: int, size: float) -> tuple[float, float]:
    """T = alpha * c1 + (1/B) * c2 for the closed forms above."""
    if kind == "all_reduce" and algo == "tree":
        steps = 2 * math.ceil(math.log2(p))
        return steps, steps * size
    if kind == "all_reduce":
        steps = 2 * (p - 1)
    elif kind in ("all_gather", "reduce_scatter", "all_to_all"):
        steps = p - 1
    else:
        raise ConfigError(f"unknown collective kind {kind!r}")
    return steps, steps * size / p


@dataclass
class CalibrationResult:
    alpha: float
    bandwidth: float
    rms_residual_s: float


def calibrate_links(
    measurements: list[tuple[int, float, float]],
    kind: str = "all_reduce",
    algo: str = "ring",
) -> CalibrationResult:
    """Least-squares fit of (alpha, B) to observed (p, size_bytes, seconds)."""
    if len(measurements) < 2:
        raise ConfigError("calibration needs at least two measurements")
    rows = []
    obs = []
    for p, size, seconds in measurements:
        if p < 2:
            raise ConfigError("calibration points need p >= 2")
        rows.append(_coeffs(kind, algo, p, size))
        obs.append(seconds)
    a = np.asarray(rows, dtype=float)
    y = np.asarray(obs, dtype=float)
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    alpha, inv_bw = float(sol[0]), float(sol[1])
    if inv_bw <= 0:
        raise ConfigError("calibration produced a non-positive bandwidth")
    resid = a @ sol - y
    rms = float(np.sqrt(np.mean(resid**2)))
    return CalibrationResult(alpha=alpha, bandwidth=1.0 / inv_bw, rms_residual_s=rms)
