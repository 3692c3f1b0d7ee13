"""Shard-based parallelism passes: TP/SP, EP, and DP (DDP/ZeRO/FSDP).

Each pass maps a single-device graph to the representative per-rank graph
(ranks are symmetric under uniform sharding) and inserts communication
nodes carrying a concrete rank group plus a "scope" attr (tp/ep/dp) that
schedule builders rebase onto global ranks.

FLOPs conservation: work a pass duplicates on every rank of a group (norms
and residuals under TP without SP, gradient accumulations over partial
sums) is tagged attrs["replicated"]=group size, so model_flops() counts it
once and summing over ranks reproduces the unsharded total exactly.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

from .ir import (
    ConfigError,
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    TensorMeta,
    TensorRole,
    op_flops,
)

BUCKET_BYTES = 25 * 2**20  # mainstream DDP default


@dataclass
class ParallelismConfig:
    tp: int = 1
    sp: int = 1
    ep: int = 1
    pp: int = 1
    dp: int = 1
    dp_mode: str = "ddp"  # ddp | zero1 | zero2 | zero3 | fsdp
    pp_schedule: str = "one_f_one_b"  # one_f_one_b | dualpipe
    microbatches: int = 1
    world_size: int = 1


def validate_config(cfg: ParallelismConfig, world: int) -> list[str]:
    """Return diagnostics; empty means the config is consistent."""
    problems: list[str] = []
    for name in ("tp", "sp", "ep", "pp", "dp", "microbatches"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    if cfg.tp * cfg.pp * cfg.dp != world:
        problems.append(
            f"tp*pp*dp = {cfg.tp * cfg.pp * cfg.dp} does not equal world size {world}"
        )
    if cfg.sp not in (1, cfg.tp):
        problems.append(f"sp must be 1 or tp ({cfg.tp}), got {cfg.sp}")
    if cfg.dp_mode not in ("ddp", "zero1", "zero2", "zero3", "fsdp"):
        problems.append(f"unknown dp mode {cfg.dp_mode!r}")
    if cfg.pp_schedule not in ("one_f_one_b", "dualpipe"):
        problems.append(f"unknown pipeline schedule {cfg.pp_schedule!r}")
    if cfg.pp_schedule == "one_f_one_b" and cfg.microbatches < cfg.pp:
        problems.append(
            f"one_f_one_b needs microbatches >= pp ({cfg.microbatches} < {cfg.pp})"
        )
    if cfg.pp_schedule == "dualpipe" and cfg.pp % 2 != 0:
        problems.append("dualpipe needs an even pipeline stage count")
    if cfg.ep > cfg.dp or cfg.dp % cfg.ep != 0:
        problems.append(f"ep ({cfg.ep}) must divide dp ({cfg.dp}); EP reuses DP ranks")
    return problems


def _clone_nodes(g: OperatorGraph) -> list[OpNode]:
    return [
        OpNode(n.id, n.kind, list(n.inputs), list(n.outputs), copy.deepcopy(n.attrs), n.phase)
        for n in g.nodes
    ]


def _shard(shape: tuple[int, ...], axis: int, ways: int, what: str) -> tuple[int, ...]:
    if shape[axis] % ways != 0:
        raise ConfigError(f"{what}: extent {shape[axis]} not divisible by {ways}")
    out = list(shape)
    out[axis] //= ways
    return tuple(out)


def _ref_node(ref: str) -> str:
    return ref.rsplit(":", 1)[0] if ":" in ref else ref


# ---------------------------------------------------------------------------
# Tensor parallelism (with optional sequence parallelism)
# ---------------------------------------------------------------------------


def apply_tp(g: OperatorGraph, tp: int, sp_enabled: bool = False) -> OperatorGraph:
    """Megatron-style sharding keyed on generator tags.

    Column matmuls split the weight's last dim, rows split the first; the
    activation leaving each row matmul is all-reduced (or reduce-scattered
    with SP, with all-gathers re-forming full sequences before each column
    group). Backward communication mirrors forward: reduce-scatter/all-
    gather swap roles, and without SP the accumulated gradient entering
    each sharded region is all-reduced.
    """
    if tp == 1:
        return g
    sp = tp if sp_enabled else 1
    group = {"group": list(range(tp)), "scope": "tp", "cat": "comm"}

    nodes = _clone_nodes(g)
    inputs = dict(g.graph_inputs)

    for n in nodes:
        if n.kind == OpKind.ATTENTION and not n.attrs.get("grad"):
            heads = int(n.attrs.get("heads", 1))
            kv_heads = int(n.attrs.get("kv_heads", heads))
            if heads % tp or kv_heads % tp:
                raise ConfigError(
                    f"attention {n.id!r}: heads {heads}/{kv_heads} not divisible by tp {tp}"
                )

    # shard weights referenced by tagged matmuls, kv caches by heads, and
    # (under SP) sequence dims of activation inputs
    for n in nodes:
        tag = n.attrs.get("tp_shard")
        if tag in ("column", "row"):
            w_name = n.inputs[1]
            if w_name not in inputs:
                raise ConfigError(f"tp pass: {n.id!r} weight {w_name!r} is not a graph input")
            w = inputs[w_name]
            axis = len(w.shape) - 1 if tag == "column" else 0
            inputs[w_name] = TensorMeta(_shard(w.shape, axis, tp, w_name), w.precision, w.role)
    for name, t in list(inputs.items()):
        if t.role == TensorRole.KV_CACHE:
            inputs[name] = TensorMeta(
                _shard(t.shape, len(t.shape) - 1, tp, name), t.precision, t.role
            )
        elif (
            sp > 1
            and t.role in (TensorRole.ACTIVATION, TensorRole.GRADIENT)
            and len(t.shape) == 3
        ):
            # gradient seeds mirror the S-sharded graph outputs
            inputs[name] = TensorMeta(_shard(t.shape, 1, sp, name), t.precision, t.role)

    meta: dict[str, TensorMeta] = dict(inputs)
    remap: dict[str, str] = {}
    gathered: dict[str, str] = {}  # original ref -> all_gather output ref
    region_inputs: list[tuple[str, bool]] = []  # (original ref, had forward gather)
    seen_regions: set[str] = set()
    row_syncs: list[tuple[str, str]] = []  # (node id, all_reduce|reduce_scatter)
    out_nodes: list[OpNode] = []
    counter = [0]

    def fresh(prefix: str) -> str:
        counter[0] += 1
        return f"{prefix}{counter[0]}"

    def record(n: OpNode) -> None:
        out_nodes.append(n)
        for k in range(len(n.outputs)):
            meta[n.output_ref(k)] = n.outputs[k]

    def seq_sharded(ref: str) -> bool:
        if sp == 1 or ref not in meta:
            return False
        try:
            orig = g.resolve(ref)
        except Exception:
            return False
        shape = meta[ref].shape
        return len(shape) == 3 and shape[1] * sp == orig.shape[1]

    def gather_full(ref: str) -> str:
        if ref in gathered:
            return gathered[ref]
        shard = meta[ref]
        full = TensorMeta(
            (shard.shape[0], shard.shape[1] * sp, shard.shape[2]), shard.precision, shard.role
        )
        node = OpNode(fresh("tp_ag"), OpKind.ALL_GATHER, [ref], [full], dict(group))
        record(node)
        gathered[ref] = node.output_ref()
        return gathered[ref]

    fwd = [n for n in nodes if n.phase == Phase.FORWARD]
    bwd = [n for n in nodes if n.phase != Phase.FORWARD]

    for n in fwd:
        orig = g.node(n.id)
        n.inputs = [remap.get(r, r) for r in n.inputs]
        tag = n.attrs.get("tp_shard")

        opens_region = tag == "column" or n.kind == OpKind.ROUTER_TOPK
        if opens_region:
            region_ref = orig.inputs[0]
            if seq_sharded(n.inputs[0]):
                n.inputs[0] = gather_full(n.inputs[0])
                if region_ref not in seen_regions:
                    region_inputs.append((region_ref, True))
                    seen_regions.add(region_ref)
            elif tag == "column" and region_ref not in seen_regions:
                region_inputs.append((region_ref, False))
                seen_regions.add(region_ref)

        if tag == "column":
            n.outputs = [
                TensorMeta(_shard(t.shape, len(t.shape) - 1, tp, n.id), t.precision, t.role)
                for t in n.outputs
            ]
            record(n)
        elif tag == "row":
            record(n)
            sync = "reduce_scatter" if sp > 1 and "expert" not in n.attrs else "all_reduce"
            full = n.outputs[0]
            if sync == "reduce_scatter":
                axis = 1 if len(full.shape) == 3 else 0
                out = TensorMeta(_shard(full.shape, axis, sp, n.id), full.precision, full.role)
                comm = OpNode(fresh("tp_rs"), OpKind.REDUCE_SCATTER, [n.output_ref()], [out], dict(group))
            else:
                comm = OpNode(fresh("tp_ar"), OpKind.ALL_REDUCE, [n.output_ref()], [full], dict(group))
            record(comm)
            remap[n.output_ref()] = comm.output_ref()
            row_syncs.append((n.id, sync))
        elif n.kind == OpKind.ATTENTION:
            n.attrs["heads"] = n.attrs["heads"] // tp
            if "kv_heads" in n.attrs:
                n.attrs["kv_heads"] = max(1, n.attrs["kv_heads"] // tp)
            q_meta = meta[n.inputs[0]]
            n.outputs = [TensorMeta(q_meta.shape, t.precision, t.role) for t in n.outputs]
            record(n)
        else:
            # untagged: each output follows the input that originally shaped it
            new_outputs = []
            for t in n.outputs:
                shape = t.shape
                for i, ref in enumerate(n.inputs):
                    if i < len(orig.inputs) and g.resolve(orig.inputs[i]).shape == t.shape and ref in meta:
                        shape = meta[ref].shape
                        break
                new_outputs.append(TensorMeta(shape, t.precision, t.role))
            n.outputs = new_outputs
            record(n)

    # MoE under SP: per-expert rows all-reduce, the combined result is
    # re-scattered once onto the sequence shards
    if sp > 1:
        for idx, n in enumerate(out_nodes):
            if n.id == "combine":
                full = n.outputs[0]
                out = TensorMeta(_shard(full.shape, 1, sp, n.id), full.precision, full.role)
                comm = OpNode(fresh("tp_rs"), OpKind.REDUCE_SCATTER, [n.output_ref()], [out], dict(group))
                out_nodes.insert(idx + 1, comm)
                meta[comm.output_ref()] = out
                remap[n.output_ref()] = comm.output_ref()
                row_syncs.append((n.id, "reduce_scatter"))
                for m in out_nodes[idx + 2 :]:
                    m.inputs = [remap.get(r, r) for r in m.inputs]
                break

    if bwd:
        _tp_backward(
            g, out_nodes, bwd, meta, remap, gathered, region_inputs, row_syncs,
            sp, group, fresh,
        )

    outputs = [remap.get(r, r) for r in g.graph_outputs]
    result = OperatorGraph(out_nodes, inputs, outputs, g.block_multiplier)

    old_flops = {n.id: op_flops(g, n) for n in g.nodes}
    for n in result.nodes:
        if n.id in old_flops:
            f_new = op_flops(result, n)
            if f_new > 0 and f_new == old_flops[n.id]:
                n.attrs["replicated"] = tp
    result.validate()
    return result


def _tp_backward(
    g, out_nodes, bwd, meta, remap, gathered, region_inputs, row_syncs, sp, group, fresh
):
    from .backward import find_grad_ref

    def eff_shape(ref: str) -> tuple[int, ...]:
        """Shape of a forward value as its consumers see it post-comm.

        Gathered region inputs read full; reduce-scattered row outputs read
        sharded (their gradients re-gather explicitly below).
        """
        if ref in gathered:
            return meta[gathered[ref]].shape
        ref = remap.get(ref, ref)
        if ref in meta:
            return meta[ref].shape
        return g.resolve(ref).shape

    def ref_meta(ref: str) -> TensorMeta:
        if ref in meta:
            return meta[ref]
        node_id, _, k = ref.partition(":")
        for b in bwd:
            if b.id == node_id:
                return b.outputs[int(k) if k else 0]
        return g.resolve(ref)

    for n in bwd:
        # saved activations from gathered regions are consumed full, like
        # their forward counterparts (dW re-uses the gathered sequence)
        n.inputs = [gathered.get(r, remap.get(r, r)) for r in n.inputs]
        if n.kind == OpKind.ATTENTION and "heads" in n.attrs:
            n.attrs["heads"] = max(1, n.attrs["heads"] // (len(group["group"])))
            if "kv_heads" in n.attrs:
                n.attrs["kv_heads"] = max(1, n.attrs["kv_heads"] // len(group["group"]))
        tags: dict[str, int] = {}
        tags.update(n.attrs.get("grad_contrib_of", {}))
        tags.update(n.attrs.get("grad_of", {}))
        outs = list(n.outputs)
        for ref, idx in tags.items():
            t = outs[idx]
            outs[idx] = TensorMeta(eff_shape(ref), t.precision, t.role)
        n.outputs = outs

    vjps_of: dict[str, list[OpNode]] = {}
    for n in bwd:
        if "vjp_of" in n.attrs:
            vjps_of.setdefault(n.attrs["vjp_of"], []).append(n)

    grad_seeds = {
        name for name, t in g.graph_inputs.items() if t.role == TensorRole.GRADIENT
    }
    bwd_ids = {n.id for n in bwd}

    def is_grad_ref(ref: str) -> bool:
        return _ref_node(ref) in bwd_ids or ref in grad_seeds

    before: dict[int, list[OpNode]] = {}
    after: dict[int, list[OpNode]] = {}

    # dual of a forward reduce_scatter: gather the output gradient before
    # the producing node's VJPs
    for row_id, sync in row_syncs:
        if sync != "reduce_scatter":
            continue
        vjps = vjps_of.get(row_id, [])
        if not vjps:
            continue
        gy = next(r for r in vjps[0].inputs if is_grad_ref(r))
        shard = ref_meta(gy)
        axis = 1 if len(shard.shape) == 3 else 0
        full_shape = tuple(
            d * sp if i == axis else d for i, d in enumerate(shard.shape)
        )
        comm = OpNode(
            fresh("tp_bag"),
            OpKind.ALL_GATHER,
            [gy],
            [TensorMeta(full_shape, shard.precision, shard.role)],
            dict(group),
            Phase.BACKWARD,
        )
        first_idx = min(bwd.index(v) for v in vjps)
        before.setdefault(first_idx, []).append(comm)
        for v in vjps:
            v.inputs = [comm.output_ref() if r == gy else r for r in v.inputs]

    # dual of a region entry: all-reduce (or reduce-scatter when the entry
    # was gathered) the accumulated gradient of the region input
    joint_view = OperatorGraph(list(out_nodes) + bwd, {}, [], 1)
    for ref, had_gather in region_inputs:
        grad_ref = find_grad_ref(joint_view, ref)
        if grad_ref is None:
            continue
        producer_idx = next(
            (i for i, b in enumerate(bwd) if b.id == _ref_node(grad_ref)), None
        )
        if producer_idx is None:
            continue
        src = ref_meta(grad_ref)
        if had_gather:
            out = TensorMeta(
                tuple(d // sp if i == 1 else d for i, d in enumerate(src.shape)),
                src.precision,
                src.role,
            )
            comm = OpNode(
                fresh("tp_brs"), OpKind.REDUCE_SCATTER, [grad_ref], [out], dict(group), Phase.BACKWARD
            )
        else:
            comm = OpNode(
                fresh("tp_bar"), OpKind.ALL_REDUCE, [grad_ref], [src], dict(group), Phase.BACKWARD
            )
        for i, b in enumerate(bwd):
            if i == producer_idx:
                continue
            b.inputs = [comm.output_ref() if r == grad_ref else r for r in b.inputs]
        after.setdefault(producer_idx, []).append(comm)

    for i, n in enumerate(bwd):
        for c in before.get(i, []):
            out_nodes.append(c)
            meta[c.output_ref()] = c.outputs[0]
        out_nodes.append(n)
        for c in after.get(i, []):
            out_nodes.append(c)
            meta[c.output_ref()] = c.outputs[0]


# ---------------------------------------------------------------------------
# Expert parallelism
# ---------------------------------------------------------------------------


def apply_ep(g: OperatorGraph, ep: int, rank_stride: int = 1) -> OperatorGraph:
    """Partition experts num_experts/ep per rank with dispatch/combine a2a.

    The representative rank keeps the first num_experts/ep experts; local
    experts process tokens from every EP peer, so per-expert token extents
    scale by ep while per-rank totals stay flat (exact FLOPs conservation).
    The a2a payload per peer is batch*seq*top_k*hidden/ep elements
    (attrs["chunk_elems"]).
    """
    if ep == 1:
        return g
    routers = [n for n in g.nodes if n.kind == OpKind.ROUTER_TOPK]
    if not routers:
        raise ConfigError("apply_ep needs a MoE graph (no router_topk node found)")
    router = routers[0]
    n_experts = int(router.attrs["num_experts"])
    if n_experts % ep != 0:
        raise ConfigError(f"num_experts {n_experts} not divisible by ep {ep}")
    local = n_experts // ep
    tokens = int(router.attrs["tokens_per_expert"])
    group = {"group": [r * rank_stride for r in range(ep)], "scope": "ep", "cat": "comm"}

    local_pref = tuple(f"exp{e}_" for e in range(local))
    remote_pref = tuple(f"exp{e}_" for e in range(local, n_experts))

    nodes = [n for n in _clone_nodes(g) if not n.id.startswith(remote_pref)]
    inputs = {k: v for k, v in g.graph_inputs.items() if not k.startswith(remote_pref)}

    h = router.outputs[0].shape[-1]
    prec = router.outputs[0].precision
    bsk = tokens * n_experts  # batch*seq*top_k under uniform routing
    chunk_elems = bsk * h // ep
    act = lambda rows: TensorMeta((rows, h), prec, TensorRole.ACTIVATION)

    def routed_expert(n: OpNode) -> int | None:
        """Expert index whose router output this node's gradient tags name."""
        for key in ("grad_of", "grad_contrib_of"):
            for ref in n.attrs.get(key, {}):
                if _ref_node(ref) == router.id:
                    _, _, k = ref.partition(":")
                    return int(k) if k else 0
        return None

    def scale_tokens(n: OpNode) -> None:
        if not n.id.startswith(local_pref) and routed_expert(n) is None:
            return
        outs = []
        for t in n.outputs:
            if t.role != TensorRole.WEIGHT and t.shape and t.shape[0] == tokens:
                outs.append(TensorMeta((tokens * ep,) + t.shape[1:], t.precision, t.role))
            else:
                outs.append(t)
        n.outputs = outs

    dispatch = OpNode(
        "ep_dispatch",
        OpKind.ALL_TO_ALL,
        [router.output_ref(e) for e in range(n_experts)],
        [act(tokens * ep) for _ in range(local)],
        {**group, "chunk_elems": chunk_elems},
    )
    remap = {router.output_ref(e): dispatch.output_ref(e) for e in range(local)}

    out_nodes: list[OpNode] = []
    dispatched = False
    combine_grad_src: str | None = None
    router_bwd: OpNode | None = None
    local_vjp_grad_inputs: list[str] = []

    fwd = [n for n in nodes if n.phase == Phase.FORWARD]
    bwd = [n for n in nodes if n.phase != Phase.FORWARD]

    for n in fwd:
        if not dispatched and n.id.startswith(local_pref):
            out_nodes.append(dispatch)
            dispatched = True
        if n.id == "combine":
            comb = OpNode(
                "ep_combine",
                OpKind.ALL_TO_ALL,
                [f"exp{e}_down_proj" for e in range(local)],
                [act(bsk)],
                {**group, "chunk_elems": chunk_elems},
            )
            out_nodes.append(comb)
            n.inputs = [comb.output_ref()]
            out_nodes.append(n)
            continue
        n.inputs = [remap.get(r, r) for r in n.inputs]
        scale_tokens(n)
        out_nodes.append(n)

    if bwd:
        kept: list[OpNode] = []
        for n in bwd:
            if n.attrs.get("vjp_of") == "combine":
                if combine_grad_src is None:
                    combine_grad_src = n.inputs[0]
                continue  # per-expert slices come from the gradient a2a
            exp = routed_expert(n)
            if exp is not None and exp >= local and not n.id.startswith(local_pref):
                continue  # remote-expert gradient accumulator
            if n.attrs.get("vjp_of") == router.id:
                router_bwd = n
            kept.append(n)

        grad_dispatch = None
        if combine_grad_src is not None:
            grad_dispatch = OpNode(
                "ep_grad_dispatch",
                OpKind.ALL_TO_ALL,
                [combine_grad_src],
                [act(tokens * ep) for _ in range(local)],
                {**group, "chunk_elems": chunk_elems},
                Phase.BACKWARD,
            )
            for e in range(local):
                remap[f"combine_d{e}"] = grad_dispatch.output_ref(e)

        grad_combine = None
        if router_bwd is not None:
            kept_ids = {n.id for n in kept}
            local_vjp_grad_inputs = [
                r for r in router_bwd.inputs if _ref_node(r) in kept_ids
            ]
            grad_combine = OpNode(
                "ep_grad_combine",
                OpKind.ALL_TO_ALL,
                local_vjp_grad_inputs,
                [act(bsk)],
                {**group, "chunk_elems": chunk_elems},
                Phase.BACKWARD,
            )
            router_bwd.inputs = [grad_combine.output_ref()]

        emitted_gd = False
        for n in kept:
            if (
                grad_dispatch is not None
                and not emitted_gd
                and (
                    n.id.startswith(local_pref)
                    or any(_ref_node(r).startswith("combine_d") for r in n.inputs)
                )
            ):
                out_nodes.append(grad_dispatch)
                emitted_gd = True
            if n is router_bwd and grad_combine is not None:
                out_nodes.append(grad_combine)
            n.inputs = [remap.get(r, r) for r in n.inputs]
            scale_tokens(n)
            # gradient tags follow the rewiring so later shard passes sync
            # shapes against the dispatched (token-scaled) forward values
            for key in ("grad_of", "grad_contrib_of"):
                if key in n.attrs:
                    n.attrs[key] = {remap.get(r, r): i for r, i in n.attrs[key].items()}
            out_nodes.append(n)

    outputs = [
        remap.get(r, r) for r in g.graph_outputs if not _ref_node(r).startswith(remote_pref)
    ]
    result = OperatorGraph(out_nodes, inputs, outputs, g.block_multiplier)
    result.validate()
    return result


# ---------------------------------------------------------------------------
# Data parallelism
# ---------------------------------------------------------------------------


@dataclass
class ShardingTags:
    """Byte multipliers the memory analyzer applies per component."""

    param_mult: float = 1.0
    grad_mult: float = 1.0
    opt_mult: float = 1.0


def _grad_stream(g: OperatorGraph) -> list[tuple[str, int]]:
    """Weight-gradient refs with byte sizes, in production order."""
    from .backward import weight_gradients

    grads = weight_gradients(g)
    order = {n.id: i for i, n in enumerate(g.nodes)}
    refs = sorted(grads.values(), key=lambda ref: order[_ref_node(ref)])
    return [(ref, g.resolve(ref).bytes) for ref in refs]


def _buckets(stream: list[tuple[str, int]], bucket_bytes: int) -> list[tuple[list[str], int]]:
    """Byte-granularity slicing of the flat gradient buffer (last = remainder)."""
    total = sum(b for _, b in stream)
    if total == 0:
        return []
    spans = []
    pos = 0
    for ref, b in stream:
        spans.append((ref, pos, pos + b))
        pos += b
    n_buckets = (total + bucket_bytes - 1) // bucket_bytes
    out = []
    for i in range(n_buckets):
        lo, hi = i * bucket_bytes, min((i + 1) * bucket_bytes, total)
        refs = [ref for ref, a, b in spans if a < hi and b > lo]
        out.append((refs, hi - lo))
    return out


def apply_dp(
    g: OperatorGraph, dp: int, mode: str = "ddp", rank_stride: int = 1
) -> tuple[OperatorGraph, ShardingTags]:
    """Append gradient/parameter synchronization and emit memory multipliers."""
    if mode not in ("ddp", "zero1", "zero2", "zero3", "fsdp"):
        raise ConfigError(f"unknown dp mode {mode!r}")
    if dp == 1:
        if mode != "ddp":
            warnings.warn(f"dp=1 with mode {mode!r} is an identity", stacklevel=2)
        return g, ShardingTags()

    group = {"group": [r * rank_stride for r in range(dp)], "scope": "dp", "cat": "comm"}
    nodes = _clone_nodes(g)
    inputs = dict(g.graph_inputs)
    outputs = list(g.graph_outputs)
    grad_stream = _grad_stream(g)

    def bucket_nodes(kind: OpKind, prefix: str) -> list[OpNode]:
        made = []
        for i, (refs, nbytes) in enumerate(_buckets(grad_stream, BUCKET_BYTES)):
            meta = g.resolve(refs[0])
            elt = max(meta.bytes // meta.numel, 1)
            made.append(
                OpNode(
                    f"{prefix}{i}",
                    kind,
                    list(refs),
                    [TensorMeta((max(nbytes // elt, 1),), meta.precision, TensorRole.GRADIENT)],
                    {**group, "payload_bytes": nbytes},
                    Phase.OPTIMIZER,
                )
            )
        return made

    weight_names = [k for k, t in inputs.items() if t.role == TensorRole.WEIGHT]
    param_bytes = g.weight_bytes()

    def param_gather(node_id: str, phase: Phase) -> OpNode:
        meta = inputs[weight_names[0]]
        elems = sum(inputs[w].numel for w in weight_names)
        return OpNode(
            node_id,
            OpKind.ALL_GATHER,
            list(weight_names),
            [TensorMeta((max(elems, 1),), meta.precision, TensorRole.BUFFER)],
            {**group, "payload_bytes": param_bytes},
            phase,
        )

    tags = ShardingTags()
    if mode == "ddp":
        sync = bucket_nodes(OpKind.ALL_REDUCE, "dp_ar")
        nodes += sync
        outputs += [n.output_ref() for n in sync]
    elif mode in ("zero1", "zero2"):
        sync = bucket_nodes(OpKind.REDUCE_SCATTER, "dp_rs")
        ag = param_gather("dp_param_ag", Phase.OPTIMIZER)
        nodes += sync + [ag]
        outputs += [n.output_ref() for n in sync] + [ag.output_ref()]
        tags.opt_mult = 1.0 / dp
        if mode == "zero2":
            tags.grad_mult = 1.0 / dp
    else:  # zero3 / fsdp: shard params, prefetch per block, scatter grads
        fwd_ag = param_gather("dp_prefetch_fwd", Phase.FORWARD)
        bwd_ag = param_gather("dp_prefetch_bwd", Phase.BACKWARD)
        first_bwd = next(
            (i for i, n in enumerate(nodes) if n.phase == Phase.BACKWARD), len(nodes)
        )
        nodes = [fwd_ag] + nodes[:first_bwd] + [bwd_ag] + nodes[first_bwd:]
        sync = bucket_nodes(OpKind.REDUCE_SCATTER, "dp_rs")
        nodes += sync
        outputs += [fwd_ag.output_ref(), bwd_ag.output_ref()]
        outputs += [n.output_ref() for n in sync]
        tags.param_mult = 1.0 / dp
        tags.grad_mult = 1.0 / dp
        tags.opt_mult = 1.0 / dp

    result = OperatorGraph(nodes, inputs, outputs, g.block_multiplier)
    result.validate()
    return result, tags
