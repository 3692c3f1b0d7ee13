"""charon-ir/1 serialization.

The IR file is a UTF-8 JSON document:

    {
      "version": "charon-ir/1",
      "inputs": [{"name", "shape", "dtype", "role"}, ...],
      "nodes":  [{"id", "kind", "inputs", "outputs", "attrs", "phase"}, ...],
      "outputs": [refs...],
      "block_multiplier": int
    }

Node outputs carry "shape"/"dtype" (and "role"). parse accepts any node
order for valid DAGs (stable topological re-sort), so parse(emit(g)) equals
g up to node ordering and emit(parse(text)) round-trips.
"""

from __future__ import annotations

import json

from .ir import (
    GraphError,
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    Precision,
    TensorMeta,
    TensorRole,
)

IR_VERSION = "charon-ir/1"


class ParseError(GraphError):
    """IR document violates the charon-ir/1 schema."""


def emit_ir(g: OperatorGraph) -> str:
    doc = {
        "version": IR_VERSION,
        "inputs": [
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": t.precision.value,
                "role": t.role.value,
            }
            for name, t in g.graph_inputs.items()
        ],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": list(n.inputs),
                "outputs": [
                    {
                        "shape": list(t.shape),
                        "dtype": t.precision.value,
                        "role": t.role.value,
                    }
                    for t in n.outputs
                ],
                "attrs": n.attrs,
                "phase": n.phase.value,
            }
            for n in g.nodes
        ],
        "outputs": list(g.graph_outputs),
        "block_multiplier": g.block_multiplier,
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def _tensor(entry: dict, where: str) -> TensorMeta:
    for field in ("shape", "dtype"):
        if field not in entry:
            raise ParseError(f"{where}: missing field {field!r}")
    try:
        precision = Precision(entry["dtype"])
    except ValueError:
        raise ParseError(f"{where}: unknown dtype {entry['dtype']!r}") from None
    try:
        role = TensorRole(entry.get("role", "activation"))
    except ValueError:
        raise ParseError(f"{where}: unknown role {entry['role']!r}") from None
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 1 for d in shape):
        raise ParseError(f"{where}: shape must be a list of positive integers")
    return TensorMeta(tuple(shape), precision, role)


def parse_ir(text: str) -> OperatorGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    if doc.get("version") != IR_VERSION:
        raise ParseError(f"expected version {IR_VERSION!r}, got {doc.get('version')!r}")
    for field in ("inputs", "nodes", "outputs", "block_multiplier"):
        if field not in doc:
            raise ParseError(f"missing top-level field {field!r}")

    graph_inputs: dict[str, TensorMeta] = {}
    for entry in doc["inputs"]:
        if "name" not in entry:
            raise ParseError("inputs entry: missing field 'name'")
        name = entry["name"]
        if name in graph_inputs:
            raise ParseError(f"duplicate graph input {name!r}")
        graph_inputs[name] = _tensor(entry, f"input {name!r}")

    nodes: list[OpNode] = []
    for entry in doc["nodes"]:
        if "id" not in entry:
            raise ParseError("nodes entry: missing field 'id'")
        nid = entry["id"]
        where = f"node {nid!r}"
        for field in ("kind", "inputs", "outputs"):
            if field not in entry:
                raise ParseError(f"{where}: missing field {field!r}")
        try:
            kind = OpKind(entry["kind"])
        except ValueError:
            raise ParseError(f"{where}: unknown kind {entry['kind']!r}") from None
        try:
            phase = Phase(entry.get("phase", "forward"))
        except ValueError:
            raise ParseError(f"{where}: unknown phase {entry['phase']!r}") from None
        attrs = entry.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError(f"{where}: field 'attrs' must be an object")
        outputs = [_tensor(t, where) for t in entry["outputs"]]
        nodes.append(OpNode(nid, kind, list(entry["inputs"]), outputs, attrs, phase))

    g = OperatorGraph(
        _toposort(nodes, graph_inputs),
        graph_inputs,
        list(doc["outputs"]),
        int(doc["block_multiplier"]),
    )
    g.validate()
    return g


def _toposort(nodes: list[OpNode], graph_inputs: dict[str, TensorMeta]) -> list[OpNode]:
    """Stable topological order; rejects cycles and dangling refs by name."""
    defined: dict[str, int] = {}  # ref -> producing node index
    ids = set(graph_inputs)
    for i, n in enumerate(nodes):
        if n.id in ids:
            raise ParseError(f"duplicate id {n.id!r}")
        ids.add(n.id)
        for k in range(len(n.outputs)):
            defined[n.output_ref(k)] = i

    deps: list[set[int]] = []
    for n in nodes:
        dep = set()
        for ref in n.inputs:
            if ref in graph_inputs:
                continue
            if ref not in defined:
                raise ParseError(f"node {n.id!r}: dangling input ref {ref!r}")
            dep.add(defined[ref])
        deps.append(dep)

    indegree = [len(d) for d in deps]
    out_edges: list[list[int]] = [[] for _ in nodes]
    for i, dep in enumerate(deps):
        for j in dep:
            out_edges[j].append(i)
    ready = sorted(i for i, d in enumerate(indegree) if d == 0)
    order: list[int] = []
    import heapq

    heapq.heapify(ready)
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in out_edges[i]:
            indegree[j] -= 1
            if indegree[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(nodes):
        stuck = [nodes[i].id for i in range(len(nodes)) if indegree[i] > 0]
        raise ParseError(f"cycle detected among nodes {stuck}")
    return [nodes[i] for i in order]
