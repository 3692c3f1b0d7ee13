"""Capture a PyTorch module into the extractor graph via torch.fx.

symbolic_trace records the operator-level structure; ShapeProp binds the
example-input shapes onto every value. Framework ops normalize into the
closed IR kind set through the data table in normalization.json; anything
unmapped becomes a zero-cost noop and is reported in the warning manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import torch
import torch.fx
from torch.fx.passes.shape_prop import ShapeProp

from .graph import DTYPE_NAMES, Graph, Node, Tensor, cleanup


class ExtractionError(RuntimeError):
    pass


@dataclass
class Manifest:
    unmapped: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def doc(self) -> dict:
        return {"unmapped_ops": self.unmapped, "notes": self.notes}


def load_table(path: str | None = None) -> dict:
    path = path or os.path.join(os.path.dirname(__file__), "normalization.json")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dtype_name(dtype: torch.dtype, manifest: Manifest) -> str:
    name = DTYPE_NAMES.get(str(dtype))
    if name is None:
        manifest.notes.append(f"dtype {dtype} has no IR equivalent; emitted as int8")
        return "int8"
    return name


def _tensor_meta(fx_node, manifest: Manifest, role: str = "activation") -> Tensor:
    meta = fx_node.meta.get("tensor_meta")
    if meta is None:
        raise ExtractionError(
            f"no shape metadata on {fx_node.name!r}; dynamic control flow "
            "cannot be captured"
        )
    return Tensor(tuple(int(d) for d in meta.shape), _dtype_name(meta.dtype, manifest), role)


def _lookup(table: dict, op: str, target) -> str | None:
    if op == "call_module":
        cls = type(target).__name__
        return table["call_module"].get(cls)
    if op == "call_function":
        name = getattr(target, "__name__", str(target))
        return table["call_function"].get(name)
    if op == "call_method":
        return table["call_method"].get(str(target))
    return None


def _role_for_input(name: str) -> str:
    lowered = name.lower()
    if "past" in lowered or "cache" in lowered:
        return "kv_cache"
    return "activation"


def trace_module(
    module: torch.nn.Module,
    example_inputs: tuple[torch.Tensor, ...],
    block_multiplier: int = 1,
    table: dict | None = None,
) -> tuple[Graph, Manifest]:
    """Forward-only capture of one block."""
    table = table or load_table()
    manifest = Manifest()
    try:
        gm = torch.fx.symbolic_trace(module)
    except Exception as exc:
        raise ExtractionError(f"symbolic trace failed: {exc}") from exc
    ShapeProp(gm).propagate(*example_inputs)

    modules = dict(gm.named_modules())
    inputs: dict[str, Tensor] = {}
    nodes: list[Node] = []
    ref_of: dict[torch.fx.Node, str] = {}
    outputs: list[str] = []

    def arg_refs(fx_node) -> list[str]:
        refs = []
        for a in fx_node.args:
            if isinstance(a, torch.fx.Node):
                refs.append(ref_of[a])
            elif isinstance(a, (list, tuple)):
                refs.extend(ref_of[x] for x in a if isinstance(x, torch.fx.Node))
        for v in fx_node.kwargs.values():
            if isinstance(v, torch.fx.Node):
                refs.append(ref_of[v])
        return refs

    for fx_node in gm.graph.nodes:
        if fx_node.op == "placeholder":
            name = fx_node.name if fx_node.name != "x" else "x"
            inputs[name] = _tensor_meta(fx_node, manifest, _role_for_input(name))
            ref_of[fx_node] = name
            continue
        if fx_node.op == "get_attr":
            # free parameters referenced directly become weight inputs
            tensor = gm.get_parameter(fx_node.target) if "." in str(fx_node.target) else getattr(gm, str(fx_node.target))
            wname = "w_" + str(fx_node.target).replace(".", "_")
            inputs[wname] = Tensor(tuple(tensor.shape), _dtype_name(tensor.dtype, manifest), "weight")
            ref_of[fx_node] = wname
            continue
        if fx_node.op == "output":
            for a in fx_node.args[0] if isinstance(fx_node.args[0], (tuple, list)) else [fx_node.args[0]]:
                if isinstance(a, torch.fx.Node):
                    outputs.append(ref_of[a])
            continue

        kind = _lookup(table, fx_node.op, modules.get(str(fx_node.target)) if fx_node.op == "call_module" else fx_node.target)
        if kind is None:
            manifest.unmapped.append(
                {"node": fx_node.name, "op": fx_node.op, "target": str(fx_node.target)}
            )
            kind = "noop"

        out = _tensor_meta(fx_node, manifest)
        attrs: dict = {}
        node_inputs = arg_refs(fx_node)

        if kind == "matmul" and fx_node.op == "call_module":
            linear = modules[str(fx_node.target)]
            wname = "w_" + str(fx_node.target).replace(".", "_")
            # stored [out, in]; the IR prices the logical [in, out] operand
            inputs[wname] = Tensor(
                (linear.in_features, linear.out_features),
                _dtype_name(linear.weight.dtype, manifest),
                "weight",
            )
            node_inputs = node_inputs + [wname]
            if linear.bias is not None:
                manifest.notes.append(f"{fx_node.target}: bias folded into the matmul")
        elif kind in ("rmsnorm", "layernorm") and fx_node.op == "call_module":
            manifest.notes.append(f"{fx_node.target}: norm scale folded into the op")
        elif kind == "attention":
            q = fx_node.args[0]
            q_meta = q.meta["tensor_meta"].shape
            if len(q_meta) != 4:
                raise ExtractionError(
                    f"{fx_node.name}: expected [batch, heads, seq, head_dim] attention input"
                )
            k = fx_node.args[1]
            attrs = {
                "heads": int(q_meta[1]),
                "head_dim": int(q_meta[3]),
                "kv_heads": int(k.meta["tensor_meta"].shape[1]),
                "causal": bool(fx_node.kwargs.get("is_causal", False)),
                "cat": "attention",
            }
            # canonical output layout is [batch, seq, heads*head_dim]
            out = Tensor(
                (int(q_meta[0]), int(q_meta[2]), int(q_meta[1] * q_meta[3])),
                out.dtype,
                out.role,
            )
            node_inputs = node_inputs[:3]
        elif kind in ("add", "mul") and len(node_inputs) < 2:
            kind = "noop"  # scalar arithmetic carries no tensor cost

        node = Node(fx_node.name, kind, node_inputs, [out], attrs)
        nodes.append(node)
        ref_of[fx_node] = node.ref()

    g = Graph(nodes, inputs, outputs, block_multiplier)
    return cleanup(g), manifest
