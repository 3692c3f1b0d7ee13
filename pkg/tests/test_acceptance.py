"""Acceptance suite: one test per criterion, one PASS line per criterion.

Every expected value is computed by an independent oracle inside the test
(closed-form arithmetic, brute-force interpreters, O(n^2) domination) and
asserted at the pinned tolerance.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from charon.backward import derive_backward, saved_activations, weight_gradients
from charon.blocks import ModelConfig, MoEConfig, build_dense_block, build_moe_block
from charon.cli import main
from charon.collectives import collective_cost
from charon.dse import (
    Candidate,
    EvalPoint,
    pareto_frontier,
    plan_dynamic_sp,
    uniform_zigzag_baseline,
    zigzag_chunks,
    SLOConstraints,
    best_under_slo,
)
from charon.engines import AnalyticalEngine, EngineStack, build_stack, roofline_time
from charon.hardware import HardwareSpec, LinkTier
from charon.ir import (
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    Precision,
    TensorMeta,
)
from charon.analyzers import memory_timeline
from charon.parallel import ParallelismConfig, apply_dp, apply_ep, apply_tp
from charon.passes import recompute
from charon.predictor import train_predictor
from charon.profiledb import ProfileDB, ProfileRecord, shape_signature
from charon.scheduler import SlowdownFactors, Transfer, integrate_contention, simulate
from charon.schedules import ScheduleProgram, _Builder, build_pp_schedule

from oracles import brute_force_frontier, liveness_peak
from test_schedules import PhaseEngine, free_hw, stack_with, unit_stage
from test_scheduler import MapEngine, probe_graph, random_two_stream_program


def ok(criterion: str, detail: str = "") -> None:
    print(f"PASS {criterion}" + (f": {detail}" if detail else ""))


def test_criterion_01_roofline_closed_form():
    start = time.time()
    hw = HardwareSpec(
        "ref", {Precision.BF16: 1e14, Precision.FP32: 1e14}, 2e12, 1e12,
        topology=[LinkTier("ring", (0, 1), 0.0, 1e11)],
    )
    g = OperatorGraph(
        [OpNode("mm", OpKind.MATMUL, ["a", "b"], [TensorMeta((4096, 4096))])],
        {"a": TensorMeta((4096, 4096)), "b": TensorMeta((4096, 4096))},
        ["mm"],
    )
    t_mm = roofline_time(g, g.node("mm"), hw)
    assert t_mm == pytest.approx(1374.4e-6, abs=0.1e-6)
    ga = OperatorGraph(
        [OpNode("add", OpKind.ADD, ["a", "b"], [TensorMeta((10**6,), Precision.FP32)])],
        {"a": TensorMeta((10**6,), Precision.FP32), "b": TensorMeta((10**6,), Precision.FP32)},
        ["add"],
    )
    t_add = roofline_time(ga, ga.node("add"), hw)
    assert t_add == pytest.approx(6e-6, abs=0.01e-6)
    elapsed = time.time() - start
    assert elapsed < 1.0
    ok("criterion-1 roofline closed-form",
       f"matmul {t_mm * 1e6:.1f} us, add {t_add * 1e6:.2f} us in {elapsed:.3f} s")


def test_criterion_02_collective_closed_forms():
    hw = HardwareSpec(
        "ref", {Precision.BF16: 1e14}, 2e12, 1e12,
        topology=[LinkTier("ring", tuple(range(8)), 5e-6, 1e11)],
    )
    ring = collective_cost("all_reduce", 2**30, [0, 1, 2, 3], hw).seconds
    assert ring == pytest.approx(16.136e-3, abs=1e-6)
    tree = collective_cost("all_reduce", 2**20, list(range(8)), hw, algo="tree").seconds
    assert tree == pytest.approx(92.9e-6, abs=0.1e-6)
    for kind in ("all_reduce", "all_gather", "reduce_scatter", "all_to_all"):
        assert collective_cost(kind, 2**30, [5], hw).seconds == 0.0
    s, ranks = 987_654_321, list(range(6))
    ar = collective_cost("all_reduce", s, ranks, hw).seconds
    ag = collective_cost("all_gather", s, ranks, hw).seconds
    rs = collective_cost("reduce_scatter", s, ranks, hw).seconds
    assert ag + rs == ar
    ok("criterion-2 collective closed-forms",
       f"ring {ring * 1e3:.3f} ms, tree {tree * 1e6:.1f} us, AG+RS=AR exact")


def test_criterion_03_pipeline_oracle_and_deadlock_freedom():
    hw = free_hw()
    cfg = ParallelismConfig(pp=4, microbatches=8, world_size=4)
    prog = build_pp_schedule([unit_stage() for _ in range(4)], cfg)
    tl = simulate(prog, stack_with(1e6, 2e6, hw), hw)
    assert tl.makespan_ns == 33e6  # (m + p - 1)(t_f + t_b) exactly
    assert tl.bubble_fraction() == pytest.approx(3 / 11, abs=1e-12)

    rng = random.Random(2024)
    for _ in range(200):
        p = rng.randint(1, 8)
        schedule = rng.choice(["one_f_one_b", "dualpipe"])
        if schedule == "dualpipe" and p % 2:
            p += 1
        m = rng.randint(p, 16)
        c = ParallelismConfig(pp=p, microbatches=m, world_size=p, pp_schedule=schedule)
        program = build_pp_schedule([unit_stage() for _ in range(p)], c)
        program.validate()
        assert simulate(program, stack_with(1e3, 2e3, hw), hw).makespan_ns > 0
    ok("criterion-3 pipeline oracle", "makespan 33 ms, bubble 3/11, 200 random schedules deadlock-free")


def test_criterion_04_flops_conservation():
    rng = random.Random(4242)
    checked = 0
    for _ in range(100):
        heads = rng.choice((2, 4, 8))
        head_dim = rng.choice((4, 8))
        use_moe = rng.random() < 0.4
        experts = rng.choice((4, 8)) if use_moe else 0
        top_k = rng.choice((1, 2)) if use_moe else 0
        batch, seq = rng.choice(((1, 16), (2, 16), (1, 32), (2, 32)))
        if use_moe and (batch * seq * top_k) % experts:
            use_moe = False
        cfg = ModelConfig(
            hidden_size=heads * head_dim, num_heads=heads, num_kv_heads=heads,
            head_dim=head_dim, ffn_hidden=rng.choice((16, 32, 64)),
            num_layers=rng.choice((1, 2)), vocab_size=32, batch=batch, seq_len=seq,
            moe=MoEConfig(experts, top_k, 32) if use_moe else None,
        )
        g = build_moe_block(cfg) if use_moe else build_dense_block(cfg)
        joint = derive_backward(g)
        base = joint.model_flops()
        for tp in (1, 2, 4, 8):
            if heads % tp or cfg.ffn_hidden % tp or seq % tp:
                continue
            for sp in (False, True):
                sharded = apply_tp(joint, tp, sp_enabled=sp)
                assert tp * sharded.model_flops() == base
                checked += 1
        if use_moe:
            for ep in (2, 4):
                if experts % ep:
                    continue
                assert apply_ep(joint, ep).model_flops() == base
                checked += 1
        for mode in ("ddp", "zero1", "zero3"):
            dpg, _ = apply_dp(joint, 4, mode)
            assert dpg.model_flops() == base
            checked += 1
    ok("criterion-4 FLOPs conservation", f"{checked} shard configurations, all exact")


def test_criterion_05_memory_liveness_oracle():
    rng = random.Random(555)
    cases = small = 0
    while cases < 500:
        heads = rng.choice((1, 2))
        cfg = ModelConfig(
            hidden_size=heads * 4, num_heads=heads, num_kv_heads=heads, head_dim=4,
            ffn_hidden=rng.choice((4, 8)), num_layers=1, vocab_size=16, batch=1,
            seq_len=rng.choice((2, 4, 8)),
        )
        g = build_dense_block(cfg)
        joint = rng.random() < 0.5
        if joint:
            g = derive_backward(g)
        if len(g.nodes) <= 30:
            small += 1
        assert memory_timeline(g).max_allocated == liveness_peak(g)
        if joint:
            redone = recompute(g, saved_activations(g))
            base_act = memory_timeline(g).component_peaks["activations"]
            new_act = memory_timeline(redone).component_peaks["activations"]
            assert new_act <= base_act
        cases += 1
    assert small >= 250  # forward-only blocks stay under 30 nodes
    ok("criterion-5 memory liveness oracle", f"{cases} cases exact; recompute never raised peaks")


def test_criterion_06_contention_work_conservation():
    rng = random.Random(66)
    for _ in range(100):
        links = [f"l{i}" for i in range(rng.randint(1, 4))]
        bw = {l: rng.uniform(0.25, 8.0) for l in links}
        transfers = [
            Transfer(rng.choice(links), rng.uniform(1, 1e8), rng.uniform(0, 1e6), i)
            for i in range(rng.randint(2, 16))
        ]
        integrate_contention(transfers, bw)
        for t in transfers:
            assert abs(t.drained - t.bytes) <= 1.0
    s, b = 5e6, 2.0
    pair = [Transfer("l", s, 0.0, 0), Transfer("l", s, 0.0, 1)]
    integrate_contention(pair, {"l": b})
    assert all(t.finish == pytest.approx(2 * s / b) for t in pair)
    ok("criterion-6 contention integrator", "work conserved within 1 byte; equal pair at 2S/B")


def test_criterion_07_overlap_sandwich_and_fixpoint():
    rng = random.Random(777)
    hw = free_hw()
    for _ in range(200):
        prog, seconds, _ = random_two_stream_program(rng)
        stack = EngineStack([MapEngine(seconds), AnalyticalEngine(hw)])
        tl = simulate(prog, stack, hw, SlowdownFactors())
        total_c = sum(v for k, v in seconds.items() if k.startswith("c")) * 1e9
        total_m = sum(v for k, v in seconds.items() if k.startswith("m")) * 1e9
        assert tl.makespan_ns >= max(total_c, total_m) - 1e-3
        assert tl.makespan_ns <= total_c + total_m + 1e-3
        stretched = simulate(prog, stack, hw, SlowdownFactors(compute=1.3, comm=1.15))
        assert stretched.ratio_iterations <= 10
    ok("criterion-7 overlap sandwich", "200 programs inside bounds; fixpoint <= 10 iterations")


def test_criterion_08_predictor_fidelity():
    start = time.time()
    hw = HardwareSpec(
        "ref", {Precision.BF16: 1e14}, 2e12, 1e12,
        topology=[LinkTier("ring", (0, 1), 0.0, 1e11)],
    )
    rng = np.random.default_rng(8)
    db = ProfileDB()

    def add(node_graph):
        g, node = node_graph
        sig = shape_signature(g, node)
        ns = roofline_time(g, node, hw) * 1e9
        try:
            db.add(ProfileRecord(hw.device_id, node.kind.value, sig, "bf16", ns, 1))
            return 1
        except Exception:
            return 0

    def matmul():
        m, k, n = (int(2 ** rng.integers(4, 13)) for _ in range(3))
        g = OperatorGraph(
            [OpNode("mm", OpKind.MATMUL, ["a", "b"], [TensorMeta((m, n))])],
            {"a": TensorMeta((m, k)), "b": TensorMeta((k, n))}, ["mm"])
        return g, g.node("mm")

    def rmsnorm():
        b, s, h = int(2 ** rng.integers(0, 6)), int(2 ** rng.integers(3, 14)), int(2 ** rng.integers(5, 14))
        g = OperatorGraph(
            [OpNode("rn", OpKind.RMSNORM, ["x"], [TensorMeta((b, s, h))])],
            {"x": TensorMeta((b, s, h))}, ["rn"])
        return g, g.node("rn")

    def attention():
        b, s = int(2 ** rng.integers(0, 4)), int(2 ** rng.integers(4, 13))
        heads, hd = int(2 ** rng.integers(1, 7)), int(2 ** rng.integers(4, 8))
        shape = (b, s, heads * hd)
        g = OperatorGraph(
            [OpNode("at", OpKind.ATTENTION, ["q", "k", "v"], [TensorMeta(shape)],
                    {"heads": heads, "head_dim": hd, "causal": True})],
            {n: TensorMeta(shape) for n in ("q", "k", "v")}, ["at"])
        return g, g.node("at")

    for gen, kind in ((matmul, "matmul"), (rmsnorm, "rmsnorm"), (attention, "attention")):
        made = attempts = 0
        while made < 500 and attempts < 50_000:
            attempts += 1
            made += add(gen())
        predictor = train_predictor(db, kind, seed=42)
        assert predictor.sample_count == 500
        assert predictor.holdout_mae <= 0.05, f"{kind} MAE {predictor.holdout_mae:.4f}"
    elapsed = time.time() - start
    assert elapsed < 30.0
    ok("criterion-8 predictor fidelity", f"matmul/rmsnorm/attention MAE <= 5% in {elapsed:.1f} s")


def test_criterion_09_frontier_and_slo_monotonicity():
    rng = random.Random(909)
    for _ in range(1000):
        n = rng.randint(1, 200)
        points = []
        for i in range(n):
            p = EvalPoint(Candidate(world=i + 1))
            p.tps_per_gpu = rng.choice([1.0, 2.0, 4.0, rng.random() * 8])
            p.tps_per_user = rng.choice([1.0, 2.0, 4.0, rng.random() * 8])
            points.append(p)
        got = {id(p) for p in pareto_frontier(points)}
        vals = [(p.tps_per_gpu, p.tps_per_user) for p in points]
        expect = {id(points[i]) for i in brute_force_frontier(vals)}
        assert got == expect

    # constructed lattice: relaxing the TPS/user constraint is monotone
    lattice = []
    for gpu, user in [(1, 9), (2, 8), (4, 6), (6, 4), (8, 2), (9, 1)]:
        p = EvalPoint(Candidate(world=1))
        p.tps_per_gpu, p.tps_per_user = float(gpu), float(user)
        p.tpot_us = 1e6 / user
        lattice.append(p)
    best_prev = -1.0
    for bound in (9, 7, 5, 3, 1):
        best = best_under_slo(lattice, SLOConstraints(tps_per_user=bound))
        assert best is not None and best.tps_per_gpu >= best_prev
        best_prev = best.tps_per_gpu
    ok("criterion-9 frontier correctness", "1000 sets match brute force; SLO relaxation monotone")


def test_criterion_10_dynamic_sp_dominance():
    model = ModelConfig(
        hidden_size=64, num_heads=8, num_kv_heads=8, head_dim=8, ffn_hidden=128,
        num_layers=1, vocab_size=64, batch=1, seq_len=64,
    )
    hw = HardwareSpec(
        "ref", {Precision.BF16: 1e14}, 2e12, 1e12,
        topology=[LinkTier("ring", tuple(range(8)), 5e-6, 1e11)],
    )
    assert zigzag_chunks(4, 1) == [1, 6]
    rng = random.Random(1010)
    sp_max = 4
    for _ in range(100):
        batch = [rng.randint(1, 128) * 2 * sp_max for _ in range(rng.randint(1, 8))]
        plan = plan_dynamic_sp(batch, [1, 2, 4], model, hw)
        baseline = uniform_zigzag_baseline(batch, sp_max, model, hw)
        assert plan.total_us <= baseline + 1e-9
    ok("criterion-10 dynamic-SP dominance", "100 batches planned at or below uniform zigzag")


def test_criterion_11_end_to_end_determinism(tmp_path):
    import shutil, os

    scenarios = os.path.join(os.path.dirname(__file__), "..", "scenarios")
    shutil.copy(os.path.join(scenarios, "tiny_hw.yaml"), tmp_path / "tiny_hw.yaml")
    scn = tmp_path / "tiny.yaml"
    scn.write_text(
        """
version: charon-scenario/1
model:
  hidden_size: 256
  num_heads: 8
  num_kv_heads: 8
  head_dim: 32
  ffn_hidden: 512
  num_layers: 4
  vocab_size: 1024
  batch: 4
  seq_len: 128
  precision: bf16
hardware: tiny_hw.yaml
parallelism: {tp: 2, pp: 2, dp: 2, microbatches: 4}
mode: train
outputs: {report: report.json}
seed: 42
"""
    )
    reports, traces = [], []
    for i in range(3):
        assert main(["simulate", str(scn)]) == 0
        reports.append((tmp_path / "report.json").read_bytes())
        out = tmp_path / f"trace{i}.json"
        assert main(["trace", str(scn), "--out", str(out)]) == 0
        traces.append(out.read_bytes())
    assert reports[0] == reports[1] == reports[2]
    assert traces[0] == traces[1] == traces[2]
    doc = json.loads(traces[0])
    assert isinstance(doc["traceEvents"], list) and doc["traceEvents"]
    for ev in doc["traceEvents"]:
        assert ev["ph"] == "X" and ev["dur"] >= 0
        assert set(ev) >= {"name", "ph", "ts", "dur", "pid", "tid"}
    ok("criterion-11 end-to-end determinism", "3 runs byte-identical; trace is valid Trace Event JSON")


def test_criterion_12_primary_runs_without_secondary():
    # the primary package never imports the extractor; criterion 12's
    # extractor-equivalence half lives in the secondary component's suite
    import charon

    for mod in list(vars(charon)):
        assert "extractor" not in mod
    ok("criterion-12 primary standalone", "no secondary imports; extractor equivalence tested in extractor/")
