"""Command-line interface.

Subcommands: simulate, trace, search, breakdown, gen-profile-db, calibrate.
Exit codes: 0 success, 2 configuration error, 3 simulation error. Output
files are written to a temp path and renamed, so failures leave nothing
partial behind; identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from .analyzers import Report, build_report, breakdown as breakdown_pass, emit_chrome_trace
from .backward import derive_backward
from .blocks import build_dense_block, build_moe_block, embedding_head_flops
from .collectives import calibrate_links
from .dse import (
    SLOConstraints,
    default_rules,
    enumerate_space,
    evaluate_all,
    load_space,
    pareto_frontier,
    prune,
)
from .engines import roofline_time
from .hardware import load_hardware
from .ir import ConfigError, GraphError, OperatorGraph, OpKind, OpNode, Phase, Precision, TensorMeta
from .parallel import apply_dp, apply_ep, apply_tp
from .passes import run_pipeline
from .profiledb import ProfileDB, ProfileRecord, shape_signature
from .scenario import Scenario, load_scenario
from .scheduler import DeadlockError, Timeline, simulate
from .schedules import build_pp_schedule, split_stages

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".charon_tmp_")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_scenario(scn: Scenario) -> tuple[Timeline, Report, OperatorGraph]:
    if scn.ir_graph is not None:
        graph = scn.ir_graph
        precision = next(
            (t.precision for t in graph.graph_inputs.values()), Precision.BF16
        )
        model = None
    else:
        model = scn.model
        precision = model.precision
        build = build_moe_block if model.moe is not None else build_dense_block
        if scn.mode == "decode":
            from dataclasses import replace

            cfg = replace(model, seq_len=1, batch=scn.decode_batch)
            graph = build(cfg, kv_len=scn.decode_kv_len)
        else:
            graph = build(model)

    par = scn.parallelism
    has_backward = any(n.phase == Phase.BACKWARD for n in graph.nodes)
    if scn.mode == "train" and not has_backward:
        graph = derive_backward(graph)

    tags = None
    if par.ep > 1:
        graph = apply_ep(graph, par.ep, rank_stride=par.tp)
    graph = apply_tp(graph, par.tp, sp_enabled=par.sp > 1)

    # user optimization passes run on the sharded per-rank graph, so fusion
    # never collapses the structure the shard passes key on
    if scn.pipeline is not None:
        graph, _reports = run_pipeline(graph, scn.pipeline)

    if scn.mode == "train":
        graph, tags = apply_dp(graph, par.dp, par.dp_mode, rank_stride=par.tp)

    stages = split_stages(graph, par.pp)
    program = build_pp_schedule(stages, par)
    timeline = simulate(program, scn.stack, scn.hardware, scn.factors, scn.overlap)

    extra = 0
    if scn.include_embedding_head and model is not None:
        extra = embedding_head_flops(model)
    in_flight = min(par.pp, par.microbatches) if scn.mode == "train" else 1
    report = build_report(
        graph,
        timeline,
        scn.hardware,
        world=par.tp * par.pp,
        precision=precision,
        microbatches=par.microbatches if scn.mode == "train" else 1,
        tags=tags,
        calib=scn.memory,
        in_flight=in_flight,
        extra_flops=extra,
    )
    return timeline, report, graph


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario, args.engines, args.overlap, args.seed)
    timeline, report, _ = _run_scenario(scn)
    text = report.to_json()
    if scn.report_path:
        _write_atomic(scn.report_path, text)
        print(f"report written to {scn.report_path}")
    else:
        print(text, end="")
    if scn.trace_path:
        _write_atomic(scn.trace_path, json.dumps(emit_chrome_trace(timeline), indent=1, sort_keys=True) + "\n")
        print(f"trace written to {scn.trace_path}")
    return EXIT_OK


def cmd_trace(args) -> int:
    scn = load_scenario(args.scenario, args.engines, args.overlap, args.seed)
    timeline, _, _ = _run_scenario(scn)
    out = args.out or scn.trace_path
    if not out:
        raise ConfigError("no trace output path (use --out or outputs.trace)")
    _write_atomic(out, json.dumps(emit_chrome_trace(timeline), indent=1, sort_keys=True) + "\n")
    print(f"trace written to {out}")
    return EXIT_OK


def cmd_breakdown(args) -> int:
    scn = load_scenario(args.scenario, args.engines, args.overlap, args.seed)
    timeline, _, _ = _run_scenario(scn)
    table = breakdown_pass(timeline)
    cols = sorted({c for cols in table.values() for c in cols})
    name_w = max((len(n) for n in table), default=8) + 2
    print("Operators".ljust(name_w) + "".join(c.rjust(14) for c in cols))
    for name in sorted(table):
        row = table[name]
        print(
            name.ljust(name_w)
            + "".join(f"{row.get(c, 0.0):14.3f}" for c in cols)
        )
    return EXIT_OK


def cmd_search(args) -> int:
    scn = load_scenario(args.scenario, args.engines, args.overlap, args.seed)
    if scn.model is None:
        raise ConfigError("search requires an inline model config, not an IR file")
    with open(args.space, "r", encoding="utf-8") as fh:
        space, rule_names, slo = load_space(fh.read())
    candidates = enumerate_space(space)
    wanted = set(rule_names) | {"divisibility"}
    rules = [r for r in default_rules(scn.hardware, scn.model) if r.name in wanted]
    kept, pruned = prune(candidates, rules)
    if not kept:
        print("warning: every candidate was pruned")
    points = evaluate_all(
        kept, scn.model, scn.hardware, scn.stack, mode=args.mode,
        workers=args.workers, factors=scn.factors, overlap=scn.overlap,
        calib=scn.memory,
    )
    frontier = pareto_frontier(points)
    frontier_keys = {p.candidate.key() for p in frontier}
    best_under = None
    if slo.ttft_us or slo.tpot_us or slo.tps_per_user:
        from .dse import best_under_slo

        best_under = best_under_slo(points, slo)

    def row(p):
        return {
            "tp": p.candidate.tp, "sp": p.candidate.sp, "ep": p.candidate.ep,
            "pp": p.candidate.pp, "dp": p.candidate.dp, "world": p.candidate.world,
            "microbatches": p.candidate.microbatches,
            "prefill_batch": p.candidate.prefill_batch,
            "decode_batch": p.candidate.decode_batch,
            "prefill_chunk": p.candidate.prefill_chunk,
            "schedule": p.candidate.pp_schedule,
            "feasible": p.feasible, "reason": p.reason,
            "step_time_us": round(p.step_time_us, 3),
            "ttft_us": round(p.ttft_us, 3), "tpot_us": round(p.tpot_us, 3),
            "tps_per_gpu": round(p.tps_per_gpu, 3),
            "tps_per_user": round(p.tps_per_user, 3),
            "mfu": round(p.mfu, 6), "peak_mem_bytes": p.peak_mem_bytes,
            "frontier": p.candidate.key() in frontier_keys,
        }

    doc = {
        "results": [row(p) for p in points],
        "pruned": [
            {"tp": c.tp, "pp": c.pp, "dp": c.dp, "world": c.world, "rule": r}
            for c, r in pruned
        ],
        "frontier": [row(p) for p in frontier],
    }
    if best_under is not None:
        doc["best_under_slo"] = row(best_under)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out:
        _write_atomic(args.out, text)
        print(f"results written to {args.out} ({len(points)} evaluated, {len(pruned)} pruned)")
    else:
        print(text, end="")
    return EXIT_OK


_SWEEP_KINDS = ("matmul", "rmsnorm", "attention")


def _sweep_nodes(kind: str, rng: np.random.Generator, precision: Precision):
    """Random single-node probe graph for the synthetic profile sweep."""
    pow2 = lambda lo, hi: int(2 ** rng.integers(lo, hi + 1))
    if kind == "matmul":
        m, k, n = pow2(5, 12), pow2(5, 12), pow2(5, 12)
        inputs = {"a": TensorMeta((m, k), precision), "b": TensorMeta((k, n), precision)}
        node = OpNode("probe", OpKind.MATMUL, ["a", "b"], [TensorMeta((m, n), precision)])
    elif kind == "rmsnorm":
        b, s, h = pow2(0, 3), pow2(5, 12), pow2(7, 12)
        inputs = {"x": TensorMeta((b, s, h), precision)}
        node = OpNode("probe", OpKind.RMSNORM, ["x"], [TensorMeta((b, s, h), precision)])
    elif kind == "attention":
        b = pow2(0, 3)
        s = pow2(6, 12)
        heads = int(2 ** rng.integers(2, 6))
        head_dim = int(2 ** rng.integers(5, 8))
        shape = (b, s, heads * head_dim)
        inputs = {q: TensorMeta(shape, precision) for q in ("q", "k", "v")}
        node = OpNode(
            "probe", OpKind.ATTENTION, ["q", "k", "v"], [TensorMeta(shape, precision)],
            {"heads": heads, "head_dim": head_dim, "causal": True},
        )
    else:
        raise ConfigError(f"unsupported sweep kind {kind!r}")
    g = OperatorGraph([node], inputs, ["probe"])
    return g, node


def cmd_gen_profile_db(args) -> int:
    with open(args.hw, "r", encoding="utf-8") as fh:
        hw = load_hardware(fh.read())
    rng = np.random.default_rng(args.seed if args.seed is not None else 42)
    precision = Precision(args.precision)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    db = ProfileDB()
    duplicates = 0
    for kind in kinds:
        if kind not in _SWEEP_KINDS:
            raise ConfigError(f"gen-profile-db supports kinds {_SWEEP_KINDS}, got {kind!r}")
        made = 0
        attempts = 0
        while made < args.samples and attempts < args.samples * 20:
            attempts += 1
            g, node = _sweep_nodes(kind, rng, precision)
            sig = shape_signature(g, node)
            latency_ns = roofline_time(g, node, hw) * 1e9
            rec = ProfileRecord(hw.device_id, kind, sig, precision.value, latency_ns, 1)
            try:
                db.add(rec)
                made += 1
            except ConfigError:
                duplicates += 1
    if duplicates:
        print(f"warning: skipped {duplicates} duplicate sweep entries", file=sys.stderr)
    _write_atomic(args.out, db.to_text())
    print(f"wrote {len(db)} records to {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    measurements = []
    with open(args.measurements, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("p,"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"{args.measurements}:{line_no}: expected p,size_bytes,seconds")
            measurements.append((int(parts[0]), float(parts[1]), float(parts[2])))
    result = calibrate_links(measurements, kind=args.kind, algo=args.algo)
    print(f"alpha_s: {result.alpha:.6e}")
    print(f"bandwidth_bytes_per_s: {result.bandwidth:.6e}")
    print(f"rms_residual_s: {result.rms_residual_s:.6e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="charon", description=__doc__)
    ap.add_argument("--seed", type=int, default=None, help="override scenario seed")
    ap.add_argument("--engines", type=lambda s: s.split(","), default=None,
                    help="engine priority, e.g. profile,predict,analytical")
    ap.add_argument("--overlap", choices=["ratio", "bandwidth", "none"], default=None)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write its report")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("trace", help="run a scenario and write a Chrome trace")
    p.add_argument("scenario")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("breakdown", help="per-category time table")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("search", help="design-space exploration")
    p.add_argument("space")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=["train", "serve"], default="serve")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gen-profile-db", help="synthetic roofline-derived profile db")
    p.add_argument("--hw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="matmul,rmsnorm,attention")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--precision", default="bf16")
    p.set_defaults(func=cmd_gen_profile_db)

    p = sub.add_parser("calibrate", help="fit link alpha/bandwidth to measurements")
    p.add_argument("measurements", help="CSV lines: p,size_bytes,seconds")
    p.add_argument("--kind", default="all_reduce")
    p.add_argument("--algo", default="ring", choices=["ring", "tree"])
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None:
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except DeadlockError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (ConfigError, GraphError, FileNotFoundError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
