"""Built-in transformer decoder block generators.

Each generator returns a single block; block_multiplier records how many
identical blocks the model stacks. Norm scale vectors are folded into the
norm ops (no separate weight tensors), so weight_params() counts projection
matrices only. MoE routing uses a uniform-load assumption: tokens per expert
= batch*seq*top_k/num_experts, scaled by an optional load factor.

Shard passes key off node attrs: "tp_shard" in {"column", "row"} on
projection matmuls, "cat" for breakdown categories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .ir import (
    ConfigError,
    OperatorGraph,
    OpKind,
    OpNode,
    Precision,
    TensorMeta,
    TensorRole,
)


@dataclass
class MoEConfig:
    num_experts: int
    top_k: int
    expert_ffn_hidden: int
    load_factor: float = 1.0


@dataclass
class ModelConfig:
    hidden_size: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_hidden: int
    num_layers: int
    vocab_size: int
    precision: Precision = Precision.BF16
    batch: int = 1
    seq_len: int = 512
    moe: MoEConfig | None = None

    def __post_init__(self):
        for name in (
            "hidden_size",
            "num_heads",
            "num_kv_heads",
            "head_dim",
            "ffn_hidden",
            "num_layers",
            "vocab_size",
            "batch",
            "seq_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.num_heads * self.head_dim != self.hidden_size:
            raise ConfigError(
                f"hidden_size {self.hidden_size} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        if self.moe is not None and self.moe.top_k > self.moe.num_experts:
            raise ConfigError(
                f"top_k {self.moe.top_k} > num_experts {self.moe.num_experts}"
            )


def _attention_stack(
    cfg: ModelConfig,
    nodes: list[OpNode],
    inputs: dict[str, TensorMeta],
    x_ref: str,
    kv_len: int | None,
) -> str:
    """Append ln1 + QKV + attention + out-proj + residual; return output ref."""
    p = cfg.precision
    b, s, h = cfg.batch, cfg.seq_len, cfg.hidden_size
    q_dim = cfg.num_heads * cfg.head_dim
    kv_dim = cfg.num_kv_heads * cfg.head_dim

    act = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.ACTIVATION)
    weight = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.WEIGHT)

    nodes.append(
        OpNode("ln1", OpKind.RMSNORM, [x_ref], [act(b, s, h)], {"cat": "others"})
    )
    inputs["w_q"] = weight(h, q_dim)
    inputs["w_k"] = weight(h, kv_dim)
    inputs["w_v"] = weight(h, kv_dim)
    for name, w, dim in (("q", "w_q", q_dim), ("k", "w_k", kv_dim), ("v", "w_v", kv_dim)):
        nodes.append(
            OpNode(
                f"{name}_proj",
                OpKind.MATMUL,
                ["ln1", w],
                [act(b, s, dim)],
                {"tp_shard": "column", "cat": "attention"},
            )
        )
    attn_attrs = {
        "heads": cfg.num_heads,
        "kv_heads": cfg.num_kv_heads,
        "head_dim": cfg.head_dim,
        "causal": True,
        "cat": "attention",
    }
    attn_inputs = ["q_proj", "k_proj", "v_proj"]
    if kv_len is not None:
        inputs["kv_k"] = TensorMeta((b, kv_len, kv_dim), p, TensorRole.KV_CACHE)
        inputs["kv_v"] = TensorMeta((b, kv_len, kv_dim), p, TensorRole.KV_CACHE)
        attn_inputs += ["kv_k", "kv_v"]
        attn_attrs["kv_len"] = kv_len + s
    nodes.append(
        OpNode("attn", OpKind.ATTENTION, attn_inputs, [act(b, s, q_dim)], attn_attrs)
    )
    inputs["w_o"] = weight(q_dim, h)
    nodes.append(
        OpNode(
            "o_proj",
            OpKind.MATMUL,
            ["attn", "w_o"],
            [act(b, s, h)],
            {"tp_shard": "row", "cat": "attention"},
        )
    )
    nodes.append(
        OpNode("add1", OpKind.ADD, [x_ref, "o_proj"], [act(b, s, h)], {"cat": "others"})
    )
    nodes.append(
        OpNode("ln2", OpKind.RMSNORM, ["add1"], [act(b, s, h)], {"cat": "others"})
    )
    return "add1"


def _ffn_stack(
    cfg: ModelConfig,
    nodes: list[OpNode],
    inputs: dict[str, TensorMeta],
    in_ref: str,
    prefix: str,
    rows: int,
    ffn: int,
    expert: int | None = None,
) -> str:
    """Gate/up/silu/mul/down on a [rows, hidden] token batch; return out ref."""
    p = cfg.precision
    h = cfg.hidden_size
    act = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.ACTIVATION)
    weight = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.WEIGHT)
    extra = {} if expert is None else {"expert": expert}

    inputs[f"{prefix}w_gate"] = weight(h, ffn)
    inputs[f"{prefix}w_up"] = weight(h, ffn)
    inputs[f"{prefix}w_down"] = weight(ffn, h)
    nodes.append(
        OpNode(
            f"{prefix}gate_proj",
            OpKind.MATMUL,
            [in_ref, f"{prefix}w_gate"],
            [act(rows, ffn)],
            {"tp_shard": "column", "cat": "ffn", **extra},
        )
    )
    nodes.append(
        OpNode(
            f"{prefix}up_proj",
            OpKind.MATMUL,
            [in_ref, f"{prefix}w_up"],
            [act(rows, ffn)],
            {"tp_shard": "column", "cat": "ffn", **extra},
        )
    )
    nodes.append(
        OpNode(f"{prefix}act", OpKind.SILU, [f"{prefix}gate_proj"], [act(rows, ffn)], {"cat": "ffn", **extra})
    )
    nodes.append(
        OpNode(
            f"{prefix}gated",
            OpKind.MUL,
            [f"{prefix}act", f"{prefix}up_proj"],
            [act(rows, ffn)],
            {"cat": "ffn", **extra},
        )
    )
    nodes.append(
        OpNode(
            f"{prefix}down_proj",
            OpKind.MATMUL,
            [f"{prefix}gated", f"{prefix}w_down"],
            [act(rows, h)],
            {"tp_shard": "row", "cat": "ffn", **extra},
        )
    )
    return f"{prefix}down_proj"


def build_dense_block(cfg: ModelConfig, kv_len: int | None = None) -> OperatorGraph:
    """One dense decoder block; set kv_len for a decode-step graph."""
    if cfg.moe is not None:
        raise ConfigError("build_dense_block requires a config without moe")
    p = cfg.precision
    b, s, h = cfg.batch, cfg.seq_len, cfg.hidden_size
    act = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.ACTIVATION)

    inputs: dict[str, TensorMeta] = {"x": act(b, s, h)}
    nodes: list[OpNode] = []
    res1 = _attention_stack(cfg, nodes, inputs, "x", kv_len)
    ffn_out = _ffn_stack(cfg, nodes, inputs, "ln2", "", b * s, cfg.ffn_hidden)
    nodes.append(
        OpNode("add2", OpKind.ADD, [res1, ffn_out], [act(b, s, h)], {"cat": "others"})
    )
    g = OperatorGraph(nodes, inputs, ["add2"], block_multiplier=cfg.num_layers)
    g.validate()
    return g


def tokens_per_expert(cfg: ModelConfig) -> int:
    moe = cfg.moe
    n_tokens = cfg.batch * cfg.seq_len * moe.top_k * moe.load_factor
    return max(1, math.ceil(n_tokens / moe.num_experts))


def build_moe_block(cfg: ModelConfig, kv_len: int | None = None) -> OperatorGraph:
    """Decoder block with the FFN replaced by router_topk + per-expert FFNs."""
    if cfg.moe is None:
        raise ConfigError("build_moe_block requires cfg.moe")
    moe = cfg.moe
    p = cfg.precision
    b, s, h = cfg.batch, cfg.seq_len, cfg.hidden_size
    act = lambda *shape: TensorMeta(tuple(shape), p, TensorRole.ACTIVATION)

    inputs: dict[str, TensorMeta] = {"x": act(b, s, h)}
    nodes: list[OpNode] = []
    res1 = _attention_stack(cfg, nodes, inputs, "x", kv_len)

    tokens = tokens_per_expert(cfg)
    router_outs = [act(tokens, h) for _ in range(moe.num_experts)]
    nodes.append(
        OpNode(
            "router",
            OpKind.ROUTER_TOPK,
            ["ln2"],
            router_outs,
            {
                "top_k": moe.top_k,
                "num_experts": moe.num_experts,
                "tokens_per_expert": tokens,
                "cat": "ffn",
            },
        )
    )
    router = nodes[-1]
    expert_outs = []
    for e in range(moe.num_experts):
        out = _ffn_stack(
            cfg,
            nodes,
            inputs,
            router.output_ref(e),
            f"exp{e}_",
            tokens,
            moe.expert_ffn_hidden,
            expert=e,
        )
        expert_outs.append(out)
    # scatter-add back to [b, s, h]; costs sum(inputs)-out adds per element
    if moe.num_experts > 1:
        nodes.append(
            OpNode("combine", OpKind.ADD, expert_outs, [act(b, s, h)], {"cat": "ffn"})
        )
        ffn_ref = "combine"
    else:
        ffn_ref = expert_outs[0]
    nodes.append(
        OpNode("add2", OpKind.ADD, [res1, ffn_ref], [act(b, s, h)], {"cat": "others"})
    )
    g = OperatorGraph(nodes, inputs, ["add2"], block_multiplier=cfg.num_layers)
    g.validate()
    return g


def embedding_head_flops(cfg: ModelConfig) -> int:
    """One-time embedding lookup + LM head FLOPs, added on request only."""
    # lookup is gather (0 FLOPs); head is a [b*s, h] x [h, vocab] matmul
    return 2 * cfg.batch * cfg.seq_len * cfg.hidden_size * cfg.vocab_size


def model_flops(g: OperatorGraph, cfg: ModelConfig | None = None, include_embedding_head: bool = False) -> int:
    """Model FLOPs: block FLOPs x block_multiplier (+ head terms on request)."""
    total = g.model_flops() * g.block_multiplier
    if include_embedding_head:
        if cfg is None:
            raise ConfigError("embedding/head terms need a ModelConfig")
        total += embedding_head_flops(cfg)
    return total
