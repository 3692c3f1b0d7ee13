"""Pass pipeline and the match-and-replace rewrite engine.

Passes are graph -> graph functions; every pass output must re-validate.
Matching scans in topological order, earliest anchor first; non-overlapping
matches of one scan are replaced together, then the scan repeats until no
match remains (fused nodes do not re-match patterns keyed on concrete kinds,
so rounds terminate).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from . import ir
from .ir import (
    COMM_KINDS,
    ELEMENTWISE_KINDS,
    ConfigError,
    GraphError,
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    Precision,
    TensorMeta,
    TensorRole,
    op_flops,
)

PASSES_VERSION = "charon-passes/1"


class RewriteError(GraphError):
    """A replacement broke the matched region's external contract."""


class PipelineError(GraphError):
    """A pass produced an invalid graph."""


# ---------------------------------------------------------------------------
# Patterns and rewrites
# ---------------------------------------------------------------------------


@dataclass
class PatternNode:
    kinds: frozenset[OpKind]
    attrs: dict = field(default_factory=dict)

    def matches(self, node: OpNode) -> bool:
        if node.kind not in self.kinds:
            return False
        return all(node.attrs.get(k) == v for k, v in self.attrs.items())


@dataclass
class Pattern:
    """Connected acyclic pattern: slot 0 anchors, edges wire consumer slots.

    edges are (producer_slot, consumer_slot); the consumer must take one of
    the producer's outputs as an input. Interior slots (those with an
    outgoing edge) must not leak outputs to unmatched nodes, which is the
    fusion-legality condition.
    """

    slots: list[PatternNode]
    edges: list[tuple[int, int]]

    def __post_init__(self):
        reached = {0}
        pending = list(self.edges)
        while pending:
            progressed = False
            for e in list(pending):
                if e[0] in reached or e[1] in reached:
                    reached.update(e)
                    pending.remove(e)
                    progressed = True
            if not progressed:
                raise GraphError("pattern subgraph must be connected")
        if reached != set(range(len(self.slots))) and len(self.slots) > 1:
            raise GraphError("pattern subgraph must be connected")


@dataclass
class Rewrite:
    name: str
    pattern: Pattern
    # action(graph, match: slot -> node) -> (new nodes, old ref -> new ref)
    action: "callable"


def _find_matches(g: OperatorGraph, pattern: Pattern) -> list[dict[int, OpNode]]:
    """Non-overlapping matches in topological scan order."""
    index = {n.id: i for i, n in enumerate(g.nodes)}
    consumers: dict[str, list[OpNode]] = {}
    for n in g.nodes:
        for ref in n.inputs:
            consumers.setdefault(ref, []).append(n)

    taken: set[str] = set()
    matches: list[dict[int, OpNode]] = []

    def extend(binding: dict[int, OpNode]) -> dict[int, OpNode] | None:
        if len(binding) == len(pattern.slots):
            return binding
        for prod_s, cons_s in pattern.edges:
            if prod_s in binding and cons_s not in binding:
                prod = binding[prod_s]
                cands = []
                for k in range(len(prod.outputs)):
                    for c in consumers.get(prod.output_ref(k), []):
                        if c not in cands:
                            cands.append(c)
                for cand in sorted(cands, key=lambda c: index[c.id]):
                    if cand.id in taken or cand in binding.values():
                        continue
                    if not pattern.slots[cons_s].matches(cand):
                        continue
                    if cand.phase != prod.phase:
                        continue
                    binding[cons_s] = cand
                    result = extend(binding)
                    if result is not None:
                        return result
                    del binding[cons_s]
                return None
        return None

    for node in g.nodes:
        if node.id in taken or not pattern.slots[0].matches(node):
            continue
        binding = extend({0: node})
        if binding is None:
            continue
        # interior outputs must stay inside the match
        ok = True
        matched_ids = {n.id for n in binding.values()}
        for prod_s, _ in pattern.edges:
            prod = binding[prod_s]
            for k in range(len(prod.outputs)):
                ref = prod.output_ref(k)
                if ref in g.graph_outputs:
                    ok = False
                for c in consumers.get(ref, []):
                    if c.id not in matched_ids:
                        ok = False
        if not ok:
            continue
        matches.append(binding)
        taken.update(matched_ids)
    return matches


def match_replace(g: OperatorGraph, rewrite: Rewrite) -> tuple[OperatorGraph, int]:
    """Apply a rewrite until no match remains; returns total match count."""
    total = 0
    while True:
        matches = _find_matches(g, rewrite.pattern)
        if not matches:
            return g, total
        total += len(matches)
        g = _apply_matches(g, rewrite, matches)
        g.validate()


def _apply_matches(g, rewrite, matches) -> OperatorGraph:
    index = {n.id: i for i, n in enumerate(g.nodes)}
    removed: set[str] = set()
    # (insertion position, replacement nodes, ref remapping)
    plans = []
    for binding in matches:
        before = {
            n.output_ref(k): n.outputs[k]
            for n in binding.values()
            for k in range(len(n.outputs))
        }
        new_nodes, ref_map = rewrite.action(g, binding)
        for old_ref, new_ref in ref_map.items():
            old_meta = before.get(old_ref)
            new_meta = _meta_of(new_nodes, new_ref)
            if old_meta is not None and new_meta is not None and old_meta.shape != new_meta.shape:
                raise RewriteError(
                    f"rewrite {rewrite.name!r} changed shape of {old_ref!r}: "
                    f"{old_meta.shape} -> {new_meta.shape}"
                )
        pos = max(index[n.id] for n in binding.values())
        plans.append((pos, new_nodes, ref_map))
        removed.update(n.id for n in binding.values())

    plans.sort(key=lambda p: p[0])
    remap: dict[str, str] = {}
    for _, _, ref_map in plans:
        remap.update(ref_map)

    nodes: list[OpNode] = []
    plan_i = 0
    for i, n in enumerate(g.nodes):
        while plan_i < len(plans) and plans[plan_i][0] == i:
            for new in plans[plan_i][1]:
                new.inputs = [remap.get(r, r) for r in new.inputs]
                nodes.append(new)
            plan_i += 1
        if n.id in removed:
            continue
        attrs = copy.deepcopy(n.attrs)
        for key in ("grad_of", "grad_contrib_of"):
            if key in attrs:
                attrs[key] = {remap.get(r, r): i for r, i in attrs[key].items()}
        nodes.append(
            OpNode(
                n.id,
                n.kind,
                [remap.get(r, r) for r in n.inputs],
                list(n.outputs),
                attrs,
                n.phase,
            )
        )
    outputs = [remap.get(r, r) for r in g.graph_outputs]
    return OperatorGraph(nodes, dict(g.graph_inputs), outputs, g.block_multiplier)


def _meta_of(nodes: list[OpNode], ref: str) -> TensorMeta | None:
    for n in nodes:
        for k in range(len(n.outputs)):
            if n.output_ref(k) == ref:
                return n.outputs[k]
    return None


def make_fused(g: OperatorGraph, binding: dict[int, OpNode]) -> tuple[list[OpNode], dict[str, str]]:
    """Standard fusion action: one fused node over the matched region.

    The fused node keeps only external inputs and the terminal outputs, so
    intermediate tensor traffic disappears; FLOPs are conserved by summing
    the constituents. A per-kernel launch constant is saved per removed node.
    """
    order = sorted(binding.values(), key=lambda n: [m.id for m in g.nodes].index(n.id))
    ids = {n.id for n in order}
    internal_refs = {n.output_ref(k) for n in order for k in range(len(n.outputs))}
    ext_inputs: list[str] = []
    for n in order:
        for ref in n.inputs:
            if ref not in internal_refs and ref not in ext_inputs:
                ext_inputs.append(ref)
    terminal = order[-1]
    fused = OpNode(
        f"fused_{'_'.join(n.id for n in order)}",
        OpKind.FUSED,
        ext_inputs,
        list(terminal.outputs),
        {
            "kinds": [n.kind.value for n in order],
            "flops": sum(op_flops(g, n) for n in order),
            "kernels_saved": len(order) - 1,
            **({"cat": terminal.attrs["cat"]} if "cat" in terminal.attrs else {}),
        },
        terminal.phase,
    )
    ref_map = {
        terminal.output_ref(k): fused.output_ref(k) for k in range(len(terminal.outputs))
    }
    return [fused], ref_map


def _pnode(*kinds: OpKind, **attrs) -> PatternNode:
    return PatternNode(frozenset(kinds), attrs)


def builtin_rewrites() -> dict[str, Rewrite]:
    """Shipped rewrite library; users register more via the Rewrite type."""
    matmul_bias = Rewrite(
        "fuse_bias",
        Pattern([_pnode(OpKind.MATMUL), _pnode(OpKind.ADD)], [(0, 1)]),
        make_fused,
    )
    matmul_act = Rewrite(
        "fuse_matmul_activation",
        Pattern([_pnode(OpKind.MATMUL), _pnode(OpKind.SILU, OpKind.GELU)], [(0, 1)]),
        make_fused,
    )
    elementwise_chain = Rewrite(
        "fuse_elementwise_chain",
        Pattern(
            [
                PatternNode(frozenset(ELEMENTWISE_KINDS | {OpKind.FUSED})),
                PatternNode(frozenset(ELEMENTWISE_KINDS)),
            ],
            [(0, 1)],
        ),
        make_fused,
    )
    return {
        r.name: r for r in (matmul_bias, matmul_act, elementwise_chain)
    }


# ---------------------------------------------------------------------------
# Canonicalize
# ---------------------------------------------------------------------------


def canonicalize(g: OperatorGraph) -> OperatorGraph:
    """Drop noop nodes (rewiring consumers) and dead compute nodes."""
    while True:
        changed = False

        remap: dict[str, str] = {}
        for n in g.nodes:
            if n.kind == OpKind.NOOP and n.inputs:
                src = n.inputs[0]
                remap[n.output_ref()] = remap.get(src, src)
        if remap:
            changed = True
            nodes = [
                OpNode(
                    n.id,
                    n.kind,
                    [remap.get(r, r) for r in n.inputs],
                    list(n.outputs),
                    copy.deepcopy(n.attrs),
                    n.phase,
                )
                for n in g.nodes
                if not (n.kind == OpKind.NOOP and n.inputs)
            ]
            outputs = [remap.get(r, r) for r in g.graph_outputs]
            g = OperatorGraph(nodes, dict(g.graph_inputs), outputs, g.block_multiplier)

        # dead code: compute nodes with no path to a graph output
        live: set[str] = set()
        pending = [r for r in g.graph_outputs]
        producers = {n.output_ref(k): n for n in g.nodes for k in range(len(n.outputs))}
        while pending:
            ref = pending.pop()
            node = producers.get(ref)
            if node is None or node.id in live:
                continue
            live.add(node.id)
            pending.extend(node.inputs)
        dead = [
            n for n in g.nodes if n.id not in live and n.kind not in COMM_KINDS
        ]
        if dead:
            changed = True
            dead_ids = {n.id for n in dead}
            g = OperatorGraph(
                [n for n in g.nodes if n.id not in dead_ids],
                dict(g.graph_inputs),
                list(g.graph_outputs),
                g.block_multiplier,
            )

        if not changed:
            g.validate()
            return g


# ---------------------------------------------------------------------------
# Quantize
# ---------------------------------------------------------------------------


def quantize(g: OperatorGraph, precision_map: dict[str, str | Precision]) -> OperatorGraph:
    """Retag tensor precisions by role or node kind; FLOP counts unchanged."""
    role_keys = {r.value for r in TensorRole}
    kind_keys = {k.value for k in OpKind}
    for key in precision_map:
        if key != "all" and key not in role_keys and key not in kind_keys:
            raise ConfigError(f"quantize: unknown role/kind key {key!r}")
    pmap = {k: Precision(v) for k, v in precision_map.items()}

    def retag(t: TensorMeta, kind: OpKind | None) -> TensorMeta:
        prec = t.precision
        if "all" in pmap:
            prec = pmap["all"]
        if t.role.value in pmap:
            prec = pmap[t.role.value]
        if kind is not None and kind.value in pmap:
            prec = pmap[kind.value]
        return TensorMeta(t.shape, prec, t.role)

    inputs = {name: retag(t, None) for name, t in g.graph_inputs.items()}
    nodes = [
        OpNode(
            n.id,
            n.kind,
            list(n.inputs),
            [retag(t, n.kind) for t in n.outputs],
            copy.deepcopy(n.attrs),
            n.phase,
        )
        for n in g.nodes
    ]
    out = OperatorGraph(nodes, inputs, list(g.graph_outputs), g.block_multiplier)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Recompute
# ---------------------------------------------------------------------------


def recompute(g: OperatorGraph, policy: set[str]) -> OperatorGraph:
    """Re-materialize saved activations in the backward phase.

    Each policy tensor's backward consumers are rewired to a clone of its
    producing chain, re-executed just before first use; chains re-derive
    from graph inputs, so no forward transient outlives the forward phase
    on its account. Total FLOPs grow by the cloned nodes' FLOPs.
    """
    from .backward import saved_activations

    if not policy:
        return g
    saved = saved_activations(g)
    for ref in policy:
        if ref not in saved:
            raise GraphError(f"recompute policy tensor {ref!r} is not a saved activation")

    clone_ref: dict[str, str] = {}
    emitted: dict[str, OpNode] = {}

    def clone_for(ref: str, out: list[OpNode]) -> str:
        if ref in g.graph_inputs:
            return ref
        if ref in clone_ref:
            return clone_ref[ref]
        producer = g.producer(ref)
        if producer.id not in emitted:
            new_inputs = [clone_for(r, out) for r in producer.inputs]
            clone = OpNode(
                f"{producer.id}_rc",
                producer.kind,
                new_inputs,
                list(producer.outputs),
                {**copy.deepcopy(producer.attrs), "recompute": True},
                Phase.BACKWARD,
            )
            emitted[producer.id] = clone
            out.append(clone)
        clone = emitted[producer.id]
        for k in range(len(producer.outputs)):
            clone_ref[producer.output_ref(k)] = clone.output_ref(k)
        return clone_ref[ref]

    nodes: list[OpNode] = []
    for n in g.nodes:
        if n.phase != Phase.BACKWARD:
            nodes.append(n)
            continue
        pre: list[OpNode] = []
        new_inputs = []
        for ref in n.inputs:
            if ref in policy:
                new_inputs.append(clone_for(ref, pre))
            else:
                new_inputs.append(ref)
        nodes.extend(pre)
        nodes.append(
            OpNode(n.id, n.kind, new_inputs, list(n.outputs), copy.deepcopy(n.attrs), n.phase)
        )
    out = OperatorGraph(nodes, dict(g.graph_inputs), list(g.graph_outputs), g.block_multiplier)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PassReport:
    name: str
    matches: int
    nodes_added: int
    nodes_removed: int


@dataclass
class PassPipeline:
    passes: list[tuple[str, dict]]


def _run_fuse(g: OperatorGraph, params: dict) -> tuple[OperatorGraph, int]:
    library = builtin_rewrites()
    names = params.get("rewrites", list(library))
    total = 0
    for name in names:
        if name not in library:
            raise ConfigError(f"unknown rewrite {name!r}")
        g, n = match_replace(g, library[name])
        total += n
    return g, total


def run_pipeline(g: OperatorGraph, pipeline: PassPipeline) -> tuple[OperatorGraph, list[PassReport]]:
    reports: list[PassReport] = []
    for name, params in pipeline.passes:
        before_ids = {n.id for n in g.nodes}
        matches = 0
        try:
            if name == "canonicalize":
                g = canonicalize(g)
            elif name == "quantize":
                g = quantize(g, params.get("map", {}))
            elif name == "fuse":
                g, matches = _run_fuse(g, params)
            elif name == "recompute":
                policy = set(params.get("tensors", []))
                if params.get("full"):
                    from .backward import saved_activations

                    policy = saved_activations(g)
                g = recompute(g, policy)
            else:
                raise ConfigError(f"unknown pass {name!r}")
            g.validate()
        except GraphError as exc:
            raise PipelineError(f"pass {name!r} failed: {exc}") from exc
        after_ids = {n.id for n in g.nodes}
        reports.append(
            PassReport(
                name,
                matches,
                len(after_ids - before_ids),
                len(before_ids - after_ids),
            )
        )
    return g, reports


def load_pipeline(text: str) -> PassPipeline:
    import yaml

    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("version") != PASSES_VERSION:
        raise ConfigError(f"pipeline file must declare version {PASSES_VERSION!r}")
    known = {"canonicalize", "quantize", "fuse", "recompute"}
    passes: list[tuple[str, dict]] = []
    for entry in doc.get("passes", []):
        name = entry["name"] if isinstance(entry, dict) else entry
        params = entry.get("params", {}) if isinstance(entry, dict) else {}
        if name not in known:
            raise ConfigError(f"unknown pass name {name!r}")
        passes.append((name, params))
    return PassPipeline(passes)
