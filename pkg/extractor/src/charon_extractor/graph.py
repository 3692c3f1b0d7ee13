"""Lightweight node/graph containers mirroring the charon-ir/1 document.

The extractor talks to the simulator through IR files only, so it carries
its own minimal structures rather than importing the simulator package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

IR_VERSION = "charon-ir/1"

DTYPE_NAMES = {
    "torch.float32": "fp32",
    "torch.bfloat16": "bf16",
    "torch.float16": "fp16",
    "torch.float8_e4m3fn": "fp8",
    "torch.int8": "int8",
    "torch.int64": "int8",  # index tensors: priced by bytes, 8B -> treat as int8 x8
}

COMM_KINDS = {"all_reduce", "all_gather", "reduce_scatter", "all_to_all", "send", "recv"}


@dataclass
class Tensor:
    shape: tuple[int, ...]
    dtype: str = "bf16"
    role: str = "activation"

    def doc(self) -> dict:
        return {"shape": list(self.shape), "dtype": self.dtype, "role": self.role}


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    outputs: list[Tensor]
    attrs: dict = field(default_factory=dict)
    phase: str = "forward"

    def ref(self, k: int = 0) -> str:
        return self.id if k == 0 else f"{self.id}:{k}"


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, Tensor]
    outputs: list[str]
    block_multiplier: int = 1

    def producer(self, ref: str) -> Node | None:
        node_id = ref.rsplit(":", 1)[0] if ":" in ref else ref
        for n in self.nodes:
            if n.id == node_id:
                return n
        return None

    def resolve(self, ref: str) -> Tensor:
        if ref in self.inputs:
            return self.inputs[ref]
        node = self.producer(ref)
        if node is None:
            raise KeyError(f"unresolved ref {ref!r}")
        k = int(ref.rsplit(":", 1)[1]) if ":" in ref else 0
        return node.outputs[k]

    def emit(self) -> str:
        doc = {
            "version": IR_VERSION,
            "inputs": [
                {"name": name, **t.doc()} for name, t in self.inputs.items()
            ],
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "inputs": list(n.inputs),
                    "outputs": [t.doc() for t in n.outputs],
                    "attrs": n.attrs,
                    "phase": n.phase,
                }
                for n in self.nodes
            ],
            "outputs": list(self.outputs),
            "block_multiplier": self.block_multiplier,
        }
        return json.dumps(doc, indent=1) + "\n"


def cleanup(g: Graph) -> Graph:
    """Collapse noop chains (views, detaches, clones) and drop dead nodes."""
    remap: dict[str, str] = {}
    for n in g.nodes:
        if n.kind == "noop" and n.inputs:
            src = n.inputs[0]
            remap[n.ref()] = remap.get(src, src)
    nodes = []
    for n in g.nodes:
        if n.kind == "noop" and n.inputs:
            continue
        nodes.append(
            Node(n.id, n.kind, [remap.get(r, r) for r in n.inputs], n.outputs, n.attrs, n.phase)
        )
    outputs = [remap.get(r, r) for r in g.outputs]

    live: set[str] = set()
    pending = list(outputs)
    producers = {n.ref(k): n for n in nodes for k in range(len(n.outputs))}
    while pending:
        ref = pending.pop()
        node = producers.get(ref)
        if node is None or node.id in live:
            continue
        live.add(node.id)
        pending.extend(node.inputs)
    nodes = [n for n in nodes if n.id in live or n.kind in COMM_KINDS]

    used = {r for n in nodes for r in n.inputs} | set(outputs)
    inputs = {k: v for k, v in g.inputs.items() if k in used}
    return Graph(nodes, inputs, outputs, g.block_multiplier)
