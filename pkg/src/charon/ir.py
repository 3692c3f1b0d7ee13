"""Operator-graph intermediate representation.

Graphs are DAGs of typed operator nodes over tensor metadata only; no tensor
values flow anywhere. A value reference is the producing node's id (output 0)
or "<node_id>:<k>" for output k, or the name of a graph input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum


class Precision(str, Enum):
    FP32 = "fp32"
    BF16 = "bf16"
    FP16 = "fp16"
    FP8 = "fp8"
    INT8 = "int8"


ELEMENT_SIZE = {
    Precision.FP32: 4,
    Precision.BF16: 2,
    Precision.FP16: 2,
    Precision.FP8: 1,
    Precision.INT8: 1,
}


class TensorRole(str, Enum):
    ACTIVATION = "activation"
    WEIGHT = "weight"
    GRADIENT = "gradient"
    OPTIMIZER_STATE = "optimizer_state"
    KV_CACHE = "kv_cache"
    BUFFER = "buffer"


class OpKind(str, Enum):
    MATMUL = "matmul"
    BATCHED_MATMUL = "batched_matmul"
    ATTENTION = "attention"
    SOFTMAX = "softmax"
    RMSNORM = "rmsnorm"
    LAYERNORM = "layernorm"
    ADD = "add"
    MUL = "mul"
    SILU = "silu"
    GELU = "gelu"
    EMBEDDING_LOOKUP = "embedding_lookup"
    ROUTER_TOPK = "router_topk"
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_TO_ALL = "all_to_all"
    SEND = "send"
    RECV = "recv"
    FUSED = "fused"
    NOOP = "noop"


COMM_KINDS = frozenset(
    {
        OpKind.ALL_REDUCE,
        OpKind.ALL_GATHER,
        OpKind.REDUCE_SCATTER,
        OpKind.ALL_TO_ALL,
        OpKind.SEND,
        OpKind.RECV,
    }
)

ELEMENTWISE_KINDS = frozenset({OpKind.ADD, OpKind.MUL, OpKind.SILU, OpKind.GELU})


class Phase(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    OPTIMIZER = "optimizer"


class GraphError(Exception):
    """Structural violation in an operator graph."""


class ConfigError(Exception):
    """Inconsistent or unsupported configuration."""


@dataclass(frozen=True)
class TensorMeta:
    shape: tuple[int, ...]
    precision: Precision = Precision.BF16
    role: TensorRole = TensorRole.ACTIVATION

    def __post_init__(self):
        if any(d < 1 for d in self.shape):
            raise GraphError(f"tensor extents must be >= 1, got {self.shape}")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def bytes(self) -> int:
        return self.numel * ELEMENT_SIZE[self.precision]


@dataclass
class OpNode:
    id: str
    kind: OpKind
    inputs: list[str]
    outputs: list[TensorMeta]
    attrs: dict = field(default_factory=dict)
    phase: Phase = Phase.FORWARD

    def output_ref(self, k: int = 0) -> str:
        return self.id if k == 0 else f"{self.id}:{k}"


@dataclass
class OperatorGraph:
    nodes: list[OpNode]
    graph_inputs: dict[str, TensorMeta]
    graph_outputs: list[str]
    block_multiplier: int = 1

    # -- reference resolution ------------------------------------------------

    def resolve(self, ref: str) -> TensorMeta:
        if ref in self.graph_inputs:
            return self.graph_inputs[ref]
        node_id, k = _split_ref(ref)
        node = self._node_map().get(node_id)
        if node is None or k >= len(node.outputs):
            raise GraphError(f"unresolved tensor ref {ref!r}")
        return node.outputs[k]

    def producer(self, ref: str) -> OpNode | None:
        """Producing node for a ref, None if it is a graph input."""
        if ref in self.graph_inputs:
            return None
        node_id, _ = _split_ref(ref)
        node = self._node_map().get(node_id)
        if node is None:
            raise GraphError(f"unresolved tensor ref {ref!r}")
        return node

    def consumers(self, ref: str) -> list[OpNode]:
        return [n for n in self.nodes if ref in n.inputs]

    def node(self, node_id: str) -> OpNode:
        n = self._node_map().get(node_id)
        if n is None:
            raise GraphError(f"no node with id {node_id!r}")
        return n

    def _node_map(self) -> dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        """Check topological order, ref resolution and comm group presence."""
        seen: set[str] = set(self.graph_inputs)
        ids: set[str] = set()
        for name in self.graph_inputs:
            if ":" in name:
                raise GraphError(f"graph input name {name!r} may not contain ':'")
        for n in self.nodes:
            if n.id in ids or n.id in self.graph_inputs:
                raise GraphError(f"duplicate node id {n.id!r}")
            if ":" in n.id:
                raise GraphError(f"node id {n.id!r} may not contain ':'")
            ids.add(n.id)
            for ref in n.inputs:
                if ref not in seen:
                    raise GraphError(
                        f"node {n.id!r} input {ref!r} does not resolve to a "
                        "preceding node output or graph input"
                    )
            if n.kind in COMM_KINDS and "group" not in n.attrs:
                raise GraphError(f"communication node {n.id!r} lacks a 'group' attr")
            for k in range(len(n.outputs)):
                seen.add(n.output_ref(k))
        for ref in self.graph_outputs:
            if ref not in seen:
                raise GraphError(f"graph output {ref!r} does not resolve")

    # -- aggregate metrics ---------------------------------------------------

    def flops(self) -> int:
        """Executed FLOPs of one traversal of this graph."""
        return sum(op_flops(self, n) for n in self.nodes)

    def model_flops(self) -> int:
        """FLOPs with duplicated work counted once.

        Shard passes tag nodes whose computation is repeated on every member
        of a group with attrs["replicated"]; those count 1/group here so
        summing model_flops over ranks conserves the unsharded total.
        Recompute clones (attrs["recompute"]) re-execute existing model work
        and are excluded entirely.
        """
        total = 0.0
        for n in self.nodes:
            if n.attrs.get("recompute"):
                continue
            total += op_flops(self, n) / n.attrs.get("replicated", 1)
        return int(round(total))

    def weight_params(self) -> int:
        return sum(
            t.numel for t in self.graph_inputs.values() if t.role == TensorRole.WEIGHT
        )

    def weight_bytes(self) -> int:
        return sum(
            t.bytes for t in self.graph_inputs.values() if t.role == TensorRole.WEIGHT
        )


def _split_ref(ref: str) -> tuple[str, int]:
    if ":" in ref:
        node_id, k = ref.rsplit(":", 1)
        return node_id, int(k)
    return ref, 0


# ---------------------------------------------------------------------------
# Per-node cost accounting
# ---------------------------------------------------------------------------

# Elementwise FLOPs per output element; n-ary add/mul cost (n-1) per element.
_SILU_FLOPS_PER_ELT = 4
_GELU_FLOPS_PER_ELT = 8
_SOFTMAX_FLOPS_PER_ELT = 5
_RMSNORM_FLOPS_PER_ELT = 4
_LAYERNORM_FLOPS_PER_ELT = 7


def _matmul_dims(g: OperatorGraph, n: OpNode) -> tuple[int, int, int]:
    """Logical (M, K, N) of a matmul.

    Each operand is flattened to a 2D matrix (leading dims x last dim), then
    transposed per transpose_a/transpose_b attrs.
    """
    a = g.resolve(n.inputs[0]).shape
    b = g.resolve(n.inputs[1]).shape
    m, k_a = math.prod(a[:-1]), a[-1]
    if n.attrs.get("transpose_a"):
        m, k_a = k_a, m
    k_b, nn = math.prod(b[:-1]), b[-1]
    if n.attrs.get("transpose_b"):
        k_b, nn = nn, k_b
    if k_a != k_b:
        raise GraphError(f"matmul {n.id!r} contraction mismatch {a} x {b}")
    return m, k_a, nn


def op_flops(g: OperatorGraph, n: OpNode) -> int:
    """FLOPs of one execution of node n (communication kinds are 0)."""
    kind = n.kind
    if kind in COMM_KINDS or kind in (OpKind.NOOP, OpKind.EMBEDDING_LOOKUP):
        return 0
    if kind == OpKind.ROUTER_TOPK:
        # top-k selection only; gating cost is negligible at block scale
        return 0
    if kind == OpKind.MATMUL:
        m, k, nn = _matmul_dims(g, n)
        return 2 * m * k * nn
    if kind == OpKind.BATCHED_MATMUL:
        a = g.resolve(n.inputs[0]).shape
        b = g.resolve(n.inputs[1]).shape
        batch = math.prod(a[:-2])
        m, k = a[-2], a[-1]
        nn = b[-2] if n.attrs.get("transpose_b") else b[-1]
        return 2 * batch * m * k * nn
    if kind == OpKind.ATTENTION:
        return _attention_flops(g, n)
    if kind == OpKind.FUSED:
        return int(n.attrs["flops"])
    out_numel = n.outputs[0].numel
    if kind in (OpKind.ADD, OpKind.MUL):
        # pairwise-reduction accounting: summing k contributions per output
        # element costs k-1 adds, so n-ary scatter-adds price the same
        # before and after expert dispatch reshapes them
        in_numel = sum(g.resolve(r).numel for r in n.inputs)
        return max(in_numel - out_numel, 0)
    if kind == OpKind.SILU:
        return _SILU_FLOPS_PER_ELT * out_numel
    if kind == OpKind.GELU:
        return _GELU_FLOPS_PER_ELT * out_numel
    if kind == OpKind.SOFTMAX:
        return _SOFTMAX_FLOPS_PER_ELT * out_numel
    if kind == OpKind.RMSNORM:
        return _RMSNORM_FLOPS_PER_ELT * out_numel
    if kind == OpKind.LAYERNORM:
        return _LAYERNORM_FLOPS_PER_ELT * out_numel
    raise GraphError(f"no FLOP rule for kind {kind}")


def _attention_flops(g: OperatorGraph, n: OpNode) -> int:
    # Two matmuls (scores and values), each 2*B*heads*Sq*Skv*head_dim.
    # Causal masking halves the score area when Sq == Skv; a backward
    # attention node costs 2x its forward counterpart.
    q = g.resolve(n.inputs[0]).shape
    heads = int(n.attrs["heads"])
    head_dim = int(n.attrs["head_dim"])
    batch, s_q = q[0], q[1]
    s_kv = int(n.attrs.get("kv_len", s_q))
    flops = 4 * batch * heads * s_q * s_kv * head_dim
    if n.attrs.get("causal") and s_q == s_kv and not n.attrs.get("count_full_scores"):
        flops //= 2
    if n.attrs.get("grad"):
        flops *= 2
    return flops


def op_bytes(g: OperatorGraph, n: OpNode) -> int:
    """Memory traffic of node n: sum of input and output tensor bytes.

    Communication kinds report their payload instead: the larger of input
    and output bytes (all_gather outputs and reduce_scatter inputs carry the
    full unsharded tensor).
    """
    in_bytes = sum(g.resolve(r).bytes for r in n.inputs)
    out_bytes = sum(t.bytes for t in n.outputs)
    if n.kind in COMM_KINDS:
        return max(in_bytes, out_bytes)
    if n.kind == OpKind.NOOP:
        return 0
    return in_bytes + out_bytes


def comm_payload_bytes(g: OperatorGraph, n: OpNode) -> int:
    if n.kind not in COMM_KINDS:
        raise GraphError(f"{n.id!r} is not a communication node")
    return op_bytes(g, n)
