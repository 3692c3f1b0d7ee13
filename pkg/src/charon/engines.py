"""Operator pricing engines and the fused dispatch stack.

Engines price one node and report seconds. The default stack order is
profile -> prediction -> analytical; each engine keeps a registry check
(supports) and the analytical engine is total, so dispatch never misses.
"""

from __future__ import annotations

from dataclasses import dataclass

from .collectives import CollectiveCost, collective_cost, send_recv_cost
from .hardware import HardwareSpec
from .ir import (
    COMM_KINDS,
    ConfigError,
    OperatorGraph,
    OpKind,
    OpNode,
    comm_payload_bytes,
    op_bytes,
    op_flops,
)
from .predictor import Predictor, predict_time
from .profiledb import ProfileDB, shape_signature


def roofline_time(g: OperatorGraph, n: OpNode, hw: HardwareSpec) -> float:
    """max(FLOPs/peak, bytes/bandwidth) + kernel launch overhead, seconds."""
    if n.kind in COMM_KINDS:
        raise ConfigError(f"roofline_time prices compute nodes, not {n.kind.value}")
    precision = (n.outputs[0] if n.outputs else g.resolve(n.inputs[0])).precision
    compute_s = op_flops(g, n) / hw.peak(precision)
    memory_s = op_bytes(g, n) / hw.memory_bandwidth
    return max(compute_s, memory_s) + hw.launch_overhead


def node_group(n: OpNode) -> list[int]:
    group = n.attrs.get("group")
    if group is None:
        raise ConfigError(f"communication node {n.id!r} lacks a 'group' attr")
    return [int(r) for r in group]


class AnalyticalEngine:
    """Roofline for compute, link-centric closed forms for communication."""

    name = "analytical"

    def __init__(self, hw: HardwareSpec, algo: str = "ring"):
        self.hw = hw
        self.algo = algo

    def supports(self, g: OperatorGraph, n: OpNode) -> bool:
        return True

    def price(self, g: OperatorGraph, n: OpNode) -> float:
        return self.price_detailed(g, n)[0]

    def price_detailed(self, g: OperatorGraph, n: OpNode) -> tuple[float, CollectiveCost | None]:
        if n.kind not in COMM_KINDS:
            return roofline_time(g, n, self.hw), None
        payload = float(n.attrs.get("payload_bytes", comm_payload_bytes(g, n)))
        if n.kind in (OpKind.SEND, OpKind.RECV):
            group = node_group(n)
            if len(group) != 2:
                raise ConfigError(f"send/recv node {n.id!r} needs a 2-rank group")
            cost = send_recv_cost(payload, group[0], group[1], self.hw)
        else:
            cost = collective_cost(n.kind.value, payload, node_group(n), self.hw, self.algo)
        return cost.seconds, cost


class ProfileEngine:
    """Exact-key lookup in the profile database; misses fall through."""

    name = "profile"

    def __init__(self, db: ProfileDB, device_id: str):
        self.db = db
        self.device_id = device_id

    def _lookup(self, g: OperatorGraph, n: OpNode) -> float | None:
        precision = (n.outputs[0] if n.outputs else g.resolve(n.inputs[0])).precision
        return self.db.lookup(
            self.device_id, n.kind.value, shape_signature(g, n), precision.value
        )

    def supports(self, g: OperatorGraph, n: OpNode) -> bool:
        return self._lookup(g, n) is not None

    def price(self, g: OperatorGraph, n: OpNode) -> float:
        ns = self._lookup(g, n)
        if ns is None:
            raise ConfigError(f"profile miss for node {n.id!r}")
        return ns / 1e9


class PredictionEngine:
    """Per-kind random-forest predictors over shape features."""

    name = "prediction"

    def __init__(self, predictors: dict[str, Predictor]):
        self.predictors = predictors

    def supports(self, g: OperatorGraph, n: OpNode) -> bool:
        return n.kind.value in self.predictors and n.kind not in COMM_KINDS

    def price(self, g: OperatorGraph, n: OpNode) -> float:
        return predict_time(g, n, self.predictors[n.kind.value])


@dataclass
class EngineStack:
    engines: list

    def __post_init__(self):
        if not self.engines or self.engines[-1].name != "analytical":
            raise ConfigError("engine stack must end with the analytical engine")

    def dispatch(self, g: OperatorGraph, n: OpNode) -> tuple[float, str]:
        seconds, name, _ = self.dispatch_detailed(g, n)
        return seconds, name

    def dispatch_detailed(self, g: OperatorGraph, n: OpNode) -> tuple[float, str, CollectiveCost | None]:
        for engine in self.engines:
            if engine.supports(g, n):
                if isinstance(engine, AnalyticalEngine):
                    seconds, detail = engine.price_detailed(g, n)
                    return seconds, engine.name, detail
                return engine.price(g, n), engine.name, None
        raise ConfigError("engine stack exhausted")  # unreachable: analytical is total

    @property
    def analytical(self) -> AnalyticalEngine:
        return self.engines[-1]


def build_stack(
    hw: HardwareSpec,
    order: list[str] | None = None,
    db: ProfileDB | None = None,
    predictors: dict[str, Predictor] | None = None,
    algo: str = "ring",
) -> EngineStack:
    """Assemble an engine stack; analytical is always appended as fallback."""
    order = list(order or ("profile", "prediction", "analytical"))
    engines = []
    for name in order:
        if name == "predict":  # CLI flag alias
            name = "prediction"
        if name == "profile":
            if db is not None:
                engines.append(ProfileEngine(db, hw.device_id))
        elif name == "prediction":
            if predictors:
                engines.append(PredictionEngine(predictors))
        elif name == "analytical":
            pass  # appended below regardless of position
        else:
            raise ConfigError(f"unknown engine {name!r}")
    engines.append(AnalyticalEngine(hw, algo))
    return EngineStack(engines)
