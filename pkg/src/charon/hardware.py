"""Hardware description: device rates and the hierarchical link topology.

charon-hw/1 files are YAML:

    version: charon-hw/1
    device_id: h100-like
    peak_flops: {fp32: 6.5e13, bf16: 1.3e14, ...}   # FLOP/s per precision
    memory_bandwidth: 3.0e12                        # bytes/s
    memory_capacity: 8.0e10                         # bytes
    launch_overhead: 2.0e-6                         # seconds per kernel
    tdp: 700                                        # watts
    topology:
      - {kind: ring, members: [0,1,2,3,4,5,6,7], alpha: 5.0e-6,
         bandwidth: 1.0e11, links_per_node: 1}
      - {kind: switch, members: [0, 8, 16, ...], alpha: 1.0e-5, ...}

Tiers are listed innermost first; a collective group that fits inside one
tier uses it directly, a spanning group decomposes hierarchically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .ir import ConfigError, Precision

HW_VERSION = "charon-hw/1"


class TopologyError(ConfigError):
    """A communication group does not map onto the link topology."""


@dataclass
class LinkTier:
    kind: str  # ring | switch | mesh
    members: tuple[int, ...]
    alpha: float  # per-hop handshake latency, seconds
    bandwidth: float  # effective per-link bandwidth, bytes/s
    links_per_node: int = 1

    def __post_init__(self):
        if self.kind not in ("ring", "switch", "mesh"):
            raise ConfigError(f"unknown tier kind {self.kind!r}")
        if self.alpha < 0 or self.bandwidth <= 0:
            raise ConfigError("tier rates must be positive")


@dataclass
class HardwareSpec:
    device_id: str
    peak_flops: dict[Precision, float]
    memory_bandwidth: float
    memory_capacity: float
    launch_overhead: float = 0.0
    tdp: float = 0.0
    topology: list[LinkTier] = field(default_factory=list)

    def __post_init__(self):
        if self.memory_bandwidth <= 0 or self.memory_capacity <= 0:
            raise ConfigError("memory rates must be positive")
        for prec, rate in self.peak_flops.items():
            if rate <= 0:
                raise ConfigError(f"peak FLOP/s for {prec} must be positive")

    def peak(self, precision: Precision) -> float:
        if precision not in self.peak_flops:
            raise ConfigError(
                f"hardware {self.device_id!r} has no peak FLOP/s entry for "
                f"{precision.value}"
            )
        return self.peak_flops[precision]

    # -- topology queries ----------------------------------------------------

    def tier_for(self, ranks: list[int]) -> LinkTier:
        """Smallest tier containing every rank of the group."""
        group = set(ranks)
        best: LinkTier | None = None
        for tier in self.topology:
            if group <= set(tier.members):
                if best is None or len(tier.members) < len(best.members):
                    best = tier
        if best is None:
            raise TopologyError(f"no topology tier contains ranks {sorted(group)}")
        return best

    def split_hierarchical(self, ranks: list[int]) -> tuple[list[list[int]], LinkTier, LinkTier] | None:
        """Partition a spanning group into same-tier islands plus a parent tier.

        Returns (islands, leaf tier, parent tier) when the group spans more
        than one copy of an inner tier, else None (flat group).
        """
        group = sorted(set(ranks))
        try:
            self.tier_for(group)
            return None
        except TopologyError:
            pass
        # innermost tiers first: sort by size, ties keep declaration order
        inner = sorted(enumerate(self.topology), key=lambda it: (len(it[1].members), it[0]))
        islands: list[list[int]] = []
        leaf: LinkTier | None = None
        assigned: set[int] = set()
        for _, tier in inner:
            members = [r for r in group if r in set(tier.members) and r not in assigned]
            if not members:
                continue
            islands.append(members)
            assigned.update(members)
            leaf = leaf or tier
        if leaf is None or assigned != set(group):
            raise TopologyError(f"ranks {group} do not partition into tiers")
        leaders = [island[0] for island in islands]
        parent = self.tier_for(leaders)
        return islands, leaf, parent


def load_hardware(text: str) -> HardwareSpec:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("version") != HW_VERSION:
        raise ConfigError(f"hardware file must declare version {HW_VERSION!r}")
    for f in ("device_id", "peak_flops", "memory_bandwidth", "memory_capacity"):
        if f not in doc:
            raise ConfigError(f"hardware file missing field {f!r}")
    peaks = {Precision(k): float(v) for k, v in doc["peak_flops"].items()}
    tiers = [
        LinkTier(
            kind=t["kind"],
            members=tuple(int(r) for r in t["members"]),
            alpha=float(t["alpha"]),
            bandwidth=float(t["bandwidth"]),
            links_per_node=int(t.get("links_per_node", 1)),
        )
        for t in doc.get("topology", [])
    ]
    return HardwareSpec(
        device_id=str(doc["device_id"]),
        peak_flops=peaks,
        memory_bandwidth=float(doc["memory_bandwidth"]),
        memory_capacity=float(doc["memory_capacity"]),
        launch_overhead=float(doc.get("launch_overhead", 0.0)),
        tdp=float(doc.get("tdp", 0.0)),
        topology=tiers,
    )


def dump_hardware(hw: HardwareSpec) -> str:
    doc = {
        "version": HW_VERSION,
        "device_id": hw.device_id,
        "peak_flops": {p.value: rate for p, rate in hw.peak_flops.items()},
        "memory_bandwidth": hw.memory_bandwidth,
        "memory_capacity": hw.memory_capacity,
        "launch_overhead": hw.launch_overhead,
        "tdp": hw.tdp,
        "topology": [
            {
                "kind": t.kind,
                "members": list(t.members),
                "alpha": t.alpha,
                "bandwidth": t.bandwidth,
                "links_per_node": t.links_per_node,
            }
            for t in hw.topology
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)
