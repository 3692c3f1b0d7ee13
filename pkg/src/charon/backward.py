"""Backward-graph derivation via per-operator vector-Jacobian rules.

derive_backward turns a forward-only graph into a joint graph: the forward
nodes followed by backward-phase nodes. Seed gradients for the graph outputs
enter as graph inputs (role=gradient). Backward nodes reference the saved
forward activations they consume directly, so the saved-for-backward edges
are explicit in the IR.

Bookkeeping attrs on backward nodes:
  vjp_of           id of the forward node this node differentiates
  grad_contrib_of  {forward ref: output index} per gradient contribution
  grad_of          {forward ref: output index} on the node producing the
                   final (accumulated) gradient of that forward value
Shard passes and tests locate gradients through these tags.
"""

from __future__ import annotations

from .ir import (
    COMM_KINDS,
    GraphError,
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    TensorMeta,
    TensorRole,
)


class UnsupportedOpError(GraphError):
    """A node kind has no registered gradient rule."""


def _san(ref: str) -> str:
    return ref.replace(":", "_")


def derive_backward(g: OperatorGraph) -> OperatorGraph:
    """Return the joint forward+backward graph for a forward-only graph."""
    if any(n.phase != Phase.FORWARD for n in g.nodes):
        raise GraphError("derive_backward requires a forward-only graph")
    for n in g.nodes:
        if n.kind in COMM_KINDS or n.kind == OpKind.FUSED:
            raise UnsupportedOpError(
                f"node {n.id!r} of kind {n.kind.value} has no gradient rule"
            )

    inputs = dict(g.graph_inputs)
    bwd: list[OpNode] = []
    by_id: dict[str, OpNode] = {}
    # forward ref -> list of gradient contribution refs
    contrib: dict[str, list[str]] = {}

    def emit(node: OpNode) -> OpNode:
        node.phase = Phase.BACKWARD
        bwd.append(node)
        by_id[node.id] = node
        return node

    def finalize(ref: str) -> str | None:
        """Collapse contributions to one gradient ref, accumulating if needed."""
        refs = contrib.get(ref, [])
        if not refs:
            return None
        if len(refs) > 1:
            meta = g.resolve(ref)
            acc = emit(
                OpNode(
                    f"dacc_{_san(ref)}",
                    OpKind.ADD,
                    list(refs),
                    [TensorMeta(meta.shape, meta.precision, TensorRole.ACTIVATION)],
                    {"grad_of": {ref: 0}},
                )
            )
            return acc.output_ref()
        grad_ref = refs[0]
        node_id = grad_ref.rsplit(":", 1)[0] if ":" in grad_ref else grad_ref
        producer = by_id.get(node_id)
        if producer is not None:
            k = int(grad_ref.rsplit(":", 1)[1]) if ":" in grad_ref else 0
            producer.attrs.setdefault("grad_of", {})[ref] = k
        return grad_ref

    # seed gradients for every graph output
    for ref in g.graph_outputs:
        meta = g.resolve(ref)
        name = f"d_{_san(ref)}"
        if name in inputs or name in {n.id for n in g.nodes}:
            raise GraphError(f"seed gradient name {name!r} collides")
        inputs[name] = TensorMeta(meta.shape, meta.precision, TensorRole.GRADIENT)
        contrib.setdefault(ref, []).append(name)

    for n in reversed(g.nodes):
        grads = [finalize(n.output_ref(k)) for k in range(len(n.outputs))]
        if all(gr is None for gr in grads):
            continue
        _vjp(g, n, grads, contrib, emit)

    # finalize gradients of graph inputs; weights end with exactly one
    input_grads: dict[str, str] = {}
    for name in g.graph_inputs:
        ref = finalize(name)
        if ref is not None:
            input_grads[name] = ref

    joint = OperatorGraph(
        list(g.nodes) + bwd,
        inputs,
        list(g.graph_outputs) + list(input_grads.values()),
        block_multiplier=g.block_multiplier,
    )
    joint.validate()
    return joint


def _grad_meta(g: OperatorGraph, ref: str) -> TensorMeta:
    meta = g.resolve(ref)
    role = (
        TensorRole.GRADIENT if meta.role == TensorRole.WEIGHT else TensorRole.ACTIVATION
    )
    return TensorMeta(meta.shape, meta.precision, role)


def _vjp(g, n: OpNode, grads, contrib, emit) -> None:
    kind = n.kind
    cat = {"cat": n.attrs["cat"]} if "cat" in n.attrs else {}

    def contribute(ref: str, grad_ref: str) -> None:
        contrib.setdefault(ref, []).append(grad_ref)

    if kind in (OpKind.MATMUL, OpKind.BATCHED_MATMUL):
        gy = grads[0]
        a_ref, b_ref = n.inputs[0], n.inputs[1]
        da = emit(
            OpNode(
                f"{n.id}_dx",
                kind,
                [gy, b_ref],
                [_grad_meta(g, a_ref)],
                {"transpose_b": True, "vjp_of": n.id, "grad_contrib_of": {a_ref: 0}, **cat},
            )
        )
        db = emit(
            OpNode(
                f"{n.id}_dw",
                kind,
                [a_ref, gy],
                [_grad_meta(g, b_ref)],
                {"transpose_a": True, "vjp_of": n.id, "grad_contrib_of": {b_ref: 0}, **cat},
            )
        )
        contribute(a_ref, da.output_ref())
        contribute(b_ref, db.output_ref())
        return

    if kind == OpKind.ATTENTION:
        gy = grads[0]
        q, k, v = n.inputs[0], n.inputs[1], n.inputs[2]
        node = emit(
            OpNode(
                f"{n.id}_bwd",
                OpKind.ATTENTION,
                [gy, q, k, v],
                [_grad_meta(g, q), _grad_meta(g, k), _grad_meta(g, v)],
                {
                    **{a: n.attrs[a] for a in ("heads", "kv_heads", "head_dim", "causal", "kv_len") if a in n.attrs},
                    "grad": True,
                    "vjp_of": n.id,
                    "grad_contrib_of": {q: 0, k: 1, v: 2},
                    **cat,
                },
            )
        )
        for i, ref in enumerate((q, k, v)):
            contribute(ref, node.output_ref(i))
        return

    if kind in (OpKind.ADD, OpKind.NOOP):
        # pass-through fan-out; a shape-changing edge gets a zero-cost noop
        gy = grads[0]
        out_shape = n.outputs[0].shape
        for i, ref in enumerate(n.inputs):
            if g.resolve(ref).shape == out_shape:
                contribute(ref, gy)
            else:
                node = emit(
                    OpNode(
                        f"{n.id}_d{i}",
                        OpKind.NOOP,
                        [gy],
                        [_grad_meta(g, ref)],
                        {"vjp_of": n.id, "grad_contrib_of": {ref: 0}, **cat},
                    )
                )
                contribute(ref, node.output_ref())
        return

    if kind == OpKind.MUL:
        gy = grads[0]
        a_ref, b_ref = n.inputs[0], n.inputs[1]
        for out_ref, other in ((a_ref, b_ref), (b_ref, a_ref)):
            node = emit(
                OpNode(
                    f"{n.id}_d_{_san(out_ref)}",
                    OpKind.MUL,
                    [gy, other],
                    [_grad_meta(g, out_ref)],
                    {"vjp_of": n.id, "grad_contrib_of": {out_ref: 0}, **cat},
                )
            )
            contribute(out_ref, node.output_ref())
        return

    if kind in (OpKind.SILU, OpKind.GELU, OpKind.RMSNORM, OpKind.LAYERNORM, OpKind.SOFTMAX):
        gy = grads[0]
        # softmax differentiates through its saved output, the rest through x
        saved = n.output_ref() if kind == OpKind.SOFTMAX else n.inputs[0]
        x_ref = n.inputs[0]
        node = emit(
            OpNode(
                f"{n.id}_bwd",
                kind,
                [gy, saved],
                [_grad_meta(g, x_ref)],
                {"grad": True, "vjp_of": n.id, "grad_contrib_of": {x_ref: 0}, **cat},
            )
        )
        contribute(x_ref, node.output_ref())
        return

    if kind == OpKind.ROUTER_TOPK:
        # gather the per-expert gradients back onto the routed input
        refs = [gr for gr in grads if gr is not None]
        x_ref = n.inputs[0]
        node = emit(
            OpNode(
                f"{n.id}_bwd",
                OpKind.ADD,
                refs,
                [_grad_meta(g, x_ref)],
                {"vjp_of": n.id, "grad_contrib_of": {x_ref: 0}, **cat},
            )
        )
        contribute(x_ref, node.output_ref())
        return

    if kind == OpKind.EMBEDDING_LOOKUP:
        gy = grads[0]
        idx_ref, w_ref = n.inputs[0], n.inputs[1]
        node = emit(
            OpNode(
                f"{n.id}_dw",
                OpKind.EMBEDDING_LOOKUP,
                [gy, idx_ref],
                [_grad_meta(g, w_ref)],
                {"grad": True, "vjp_of": n.id, "grad_contrib_of": {w_ref: 0}, **cat},
            )
        )
        contribute(w_ref, node.output_ref())
        return

    raise UnsupportedOpError(f"node {n.id!r} of kind {kind.value} has no gradient rule")


def weight_gradients(joint: OperatorGraph) -> dict[str, str]:
    """Map each weight graph input to the ref of its final gradient tensor."""
    weights = {
        name for name, t in joint.graph_inputs.items() if t.role == TensorRole.WEIGHT
    }
    found: dict[str, str] = {}
    for n in joint.nodes:
        for ref, i in n.attrs.get("grad_of", {}).items():
            if ref in weights:
                if ref in found and found[ref] != n.output_ref(i):
                    raise GraphError(f"weight {ref!r} has multiple gradient tensors")
                found[ref] = n.output_ref(i)
    return found


def saved_activations(joint: OperatorGraph) -> set[str]:
    """Forward compute outputs consumed by backward-phase nodes."""
    saved: set[str] = set()
    for n in joint.nodes:
        if n.phase != Phase.BACKWARD:
            continue
        for ref in n.inputs:
            producer = joint.producer(ref)
            if producer is not None and producer.phase == Phase.FORWARD:
                saved.add(ref)
    return saved


def find_grad_ref(joint: OperatorGraph, forward_ref: str) -> str | None:
    """Final gradient ref of a forward value, if a tagged node produces it."""
    for n in joint.nodes:
        grad_of = n.attrs.get("grad_of", {})
        if forward_ref in grad_of:
            return n.output_ref(grad_of[forward_ref])
    return None
