"""Joint-graph emission: appends backward-phase nodes to a traced forward.

Mirrors standard vector-Jacobian shapes per operator kind. Seed gradients
for graph outputs enter as gradient-role inputs; every weight ends with
exactly one gradient tensor of identical shape, tagged through the same
grad_of attr convention the IR documents use.
"""

from __future__ import annotations

from .graph import Graph, Node, Tensor


def _san(ref: str) -> str:
    return ref.replace(":", "_")


def _grad_tensor(g: Graph, ref: str) -> Tensor:
    t = g.resolve(ref)
    role = "gradient" if t.role == "weight" else "activation"
    return Tensor(t.shape, t.dtype, role)


def derive_joint(g: Graph) -> Graph:
    """Forward graph -> joint graph with phase=backward nodes appended."""
    if any(n.phase != "forward" for n in g.nodes):
        raise ValueError("derive_joint expects a forward-only graph")
    inputs = dict(g.inputs)
    bwd: list[Node] = []
    contrib: dict[str, list[str]] = {}
    by_id: dict[str, Node] = {}

    def emit(node: Node) -> Node:
        node.phase = "backward"
        bwd.append(node)
        by_id[node.id] = node
        return node

    def finalize(ref: str) -> str | None:
        refs = contrib.get(ref, [])
        if not refs:
            return None
        if len(refs) > 1:
            t = g.resolve(ref)
            acc = emit(
                Node(f"dacc_{_san(ref)}", "add", list(refs),
                     [Tensor(t.shape, t.dtype, "activation")], {"grad_of": {ref: 0}})
            )
            return acc.ref()
        grad_ref = refs[0]
        node_id = grad_ref.rsplit(":", 1)[0] if ":" in grad_ref else grad_ref
        if node_id in by_id:
            k = int(grad_ref.rsplit(":", 1)[1]) if ":" in grad_ref else 0
            by_id[node_id].attrs.setdefault("grad_of", {})[ref] = k
        return grad_ref

    for ref in g.outputs:
        t = g.resolve(ref)
        seed = f"d_{_san(ref)}"
        inputs[seed] = Tensor(t.shape, t.dtype, "gradient")
        contrib.setdefault(ref, []).append(seed)

    for n in reversed(g.nodes):
        grads = [finalize(n.ref(k)) for k in range(len(n.outputs))]
        if all(gr is None for gr in grads):
            continue
        gy = next(gr for gr in grads if gr is not None)
        kind = n.kind

        if kind in ("matmul", "batched_matmul"):
            a_ref, w_ref = n.inputs[0], n.inputs[1]
            dx = emit(Node(f"{n.id}_dx", kind, [gy, w_ref], [_grad_tensor(g, a_ref)],
                           {"transpose_b": True, "vjp_of": n.id}))
            dw = emit(Node(f"{n.id}_dw", kind, [a_ref, gy], [_grad_tensor(g, w_ref)],
                           {"transpose_a": True, "vjp_of": n.id}))
            contrib.setdefault(a_ref, []).append(dx.ref())
            contrib.setdefault(w_ref, []).append(dw.ref())
        elif kind == "attention":
            q, k, v = n.inputs[0], n.inputs[1], n.inputs[2]
            node = emit(Node(
                f"{n.id}_bwd", "attention", [gy, q, k, v],
                [_grad_tensor(g, q), _grad_tensor(g, k), _grad_tensor(g, v)],
                {**{a: n.attrs[a] for a in ("heads", "kv_heads", "head_dim", "causal") if a in n.attrs},
                 "grad": True, "vjp_of": n.id},
            ))
            for i, ref in enumerate((q, k, v)):
                contrib.setdefault(ref, []).append(node.ref(i))
        elif kind == "add":
            out_shape = n.outputs[0].shape
            for i, ref in enumerate(n.inputs):
                if g.resolve(ref).shape == out_shape:
                    contrib.setdefault(ref, []).append(gy)
                else:
                    node = emit(Node(f"{n.id}_d{i}", "noop", [gy],
                                     [_grad_tensor(g, ref)], {"vjp_of": n.id}))
                    contrib.setdefault(ref, []).append(node.ref())
        elif kind == "mul":
            a_ref, b_ref = n.inputs[0], n.inputs[1]
            for out_ref, other in ((a_ref, b_ref), (b_ref, a_ref)):
                node = emit(Node(f"{n.id}_d_{_san(out_ref)}", "mul", [gy, other],
                                 [_grad_tensor(g, out_ref)], {"vjp_of": n.id}))
                contrib.setdefault(out_ref, []).append(node.ref())
        elif kind in ("silu", "gelu", "rmsnorm", "layernorm", "softmax"):
            saved = n.ref() if kind == "softmax" else n.inputs[0]
            x_ref = n.inputs[0]
            node = emit(Node(f"{n.id}_bwd", kind, [gy, saved],
                             [_grad_tensor(g, x_ref)], {"grad": True, "vjp_of": n.id}))
            contrib.setdefault(x_ref, []).append(node.ref())
        else:
            raise ValueError(f"no gradient rule for node {n.id!r} of kind {kind!r}")

    outputs = list(g.outputs)
    for name in g.inputs:
        ref = finalize(name)
        if ref is not None:
            outputs.append(ref)
    return Graph(list(g.nodes) + bwd, inputs, outputs, g.block_multiplier)


def weight_gradient_map(g: Graph) -> dict[str, str]:
    """Weight input -> final gradient ref, via the grad_of tags."""
    weights = {k for k, t in g.inputs.items() if t.role == "weight"}
    out: dict[str, str] = {}
    for n in g.nodes:
        for ref, idx in n.attrs.get("grad_of", {}).items():
            if ref in weights:
                out[ref] = n.ref(idx)
    return out
