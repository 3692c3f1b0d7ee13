import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from charon.collectives import CollectiveCost, calibrate_links, collective_cost, send_recv_cost
from charon.engines import (
    AnalyticalEngine,
    EngineStack,
    PredictionEngine,
    ProfileEngine,
    build_stack,
    roofline_time,
)
from charon.hardware import HardwareSpec, LinkTier, TopologyError, dump_hardware, load_hardware
from charon.ir import (
    ConfigError,
    OperatorGraph,
    OpKind,
    OpNode,
    Precision,
    TensorMeta,
)
from charon.predictor import TrainingError, features_for, predict_time, train_predictor
from charon.profiledb import ProfileDB, ProfileRecord, shape_signature


def act(*shape, p=Precision.BF16):
    return TensorMeta(tuple(shape), p)


def matmul_graph(m, k, n, p=Precision.BF16):
    g = OperatorGraph(
        [OpNode("mm", OpKind.MATMUL, ["a", "b"], [act(m, n, p=p)])],
        {"a": act(m, k, p=p), "b": act(k, n, p=p)},
        ["mm"],
    )
    g.validate()
    return g


# ---------------------------------------------------------------------------
# Roofline
# ---------------------------------------------------------------------------


def test_roofline_compute_bound_matmul(hw):
    g = matmul_graph(4096, 4096, 4096)
    t = roofline_time(g, g.node("mm"), hw)
    assert t == pytest.approx(1374.4e-6, abs=0.1e-6)


def test_roofline_memory_bound_add(hw):
    g = OperatorGraph(
        [OpNode("add", OpKind.ADD, ["a", "b"], [act(1_000_000, p=Precision.FP32)])],
        {"a": act(1_000_000, p=Precision.FP32), "b": act(1_000_000, p=Precision.FP32)},
        ["add"],
    )
    t = roofline_time(g, g.node("add"), hw)
    assert t == pytest.approx(6e-6, abs=0.01e-6)


def test_roofline_noop_costs_launch_only(hw):
    hw.launch_overhead = 2e-6
    g = OperatorGraph([OpNode("v", OpKind.NOOP, ["a"], [act(4)])], {"a": act(4)}, ["v"])
    assert roofline_time(g, g.node("v"), hw) == 2e-6


def test_roofline_missing_precision_entry(hw):
    hw2 = HardwareSpec("x", {Precision.BF16: 1e14}, 2e12, 1e10)
    g = matmul_graph(64, 64, 64, p=Precision.INT8)
    with pytest.raises(ConfigError, match="int8"):
        roofline_time(g, g.node("mm"), hw2)


def _plain_hw():
    return HardwareSpec(
        "probe", {p: 1e14 for p in Precision}, 2e12, 8e10,
        topology=[LinkTier("ring", tuple(range(8)), 5e-6, 1e11)],
    )


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(min_value=1, max_value=512),
    k=st.integers(min_value=1, max_value=512),
    scale=st.integers(min_value=1, max_value=8),
)
def test_roofline_monotone_in_work(m, k, scale):
    hw = _plain_hw()
    g1 = matmul_graph(m, k, 64)
    g2 = matmul_graph(m * scale, k, 64)
    t1 = roofline_time(g1, g1.node("mm"), hw)
    t2 = roofline_time(g2, g2.node("mm"), hw)
    assert t2 >= t1


def test_roofline_precision_scaling(hw):
    # halving element size halves the bandwidth term exactly
    g16 = OperatorGraph(
        [OpNode("s", OpKind.SILU, ["a"], [act(1 << 20, p=Precision.BF16)])],
        {"a": act(1 << 20, p=Precision.BF16)}, ["s"],
    )
    g8 = OperatorGraph(
        [OpNode("s", OpKind.SILU, ["a"], [act(1 << 20, p=Precision.FP8)])],
        {"a": act(1 << 20, p=Precision.FP8)}, ["s"],
    )
    t16 = roofline_time(g16, g16.node("s"), hw)
    t8 = roofline_time(g8, g8.node("s"), hw)
    assert t16 == 2 * t8  # both memory-bound here


# ---------------------------------------------------------------------------
# Collectives
# ---------------------------------------------------------------------------


def test_ring_allreduce_closed_form(hw):
    c = collective_cost("all_reduce", 2**30, [0, 1, 2, 3], hw)
    oracle = 6 * (5e-6 + (2**30 / 4) / 1e11)
    assert c.seconds == pytest.approx(oracle, abs=1e-9)
    assert c.seconds == pytest.approx(16.136e-3, abs=1e-6)


def test_tree_allreduce_closed_form(hw):
    c = collective_cost("all_reduce", 2**20, list(range(8)), hw, algo="tree")
    oracle = 6 * (5e-6 + 2**20 / 1e11)
    assert c.seconds == pytest.approx(oracle, abs=1e-12)
    assert c.seconds == pytest.approx(92.9e-6, abs=0.1e-6)


def test_single_rank_collective_is_free(hw):
    for kind in ("all_reduce", "all_gather", "reduce_scatter", "all_to_all"):
        assert collective_cost(kind, 2**30, [3], hw).seconds == 0.0


def test_allgather_plus_reducescatter_equals_allreduce(hw):
    s = 123_456_789
    ranks = [0, 1, 2, 3, 4]
    ar = collective_cost("all_reduce", s, ranks, hw).seconds
    ag = collective_cost("all_gather", s, ranks, hw).seconds
    rs = collective_cost("reduce_scatter", s, ranks, hw).seconds
    assert ag + rs == ar


@settings(max_examples=30, deadline=None)
@given(
    s1=st.integers(min_value=1, max_value=10**9),
    s2=st.integers(min_value=1, max_value=10**9),
    p=st.integers(min_value=2, max_value=8),
)
def test_collective_strictly_increasing_in_payload(s1, s2, p):
    hw = _plain_hw()
    if s1 == s2:
        s2 += 1
    lo, hi = sorted((s1, s2))
    ranks = list(range(p))
    assert (
        collective_cost("all_reduce", lo, ranks, hw).seconds
        < collective_cost("all_reduce", hi, ranks, hw).seconds
    )


def test_payload_precision_halving(hw):
    ranks = [0, 1, 2, 3]
    full = collective_cost("all_reduce", 2**20, ranks, hw)
    half = collective_cost("all_reduce", 2**19, ranks, hw)
    # alpha terms equal; transmission term halves exactly
    assert (full.seconds - full.fixed_s) == 2 * (half.seconds - half.fixed_s)


def test_send_recv_form(hw):
    c = send_recv_cost(10**8, 0, 1, hw)
    assert c.seconds == pytest.approx(5e-6 + 1e8 / 1e11)
    assert send_recv_cost(1, 2, 2, hw).seconds == 0.0


def test_all_to_all_ring_vs_switch(hw):
    intra = collective_cost("all_to_all", 2**20, [0, 1, 2, 3], hw)
    assert intra.seconds == pytest.approx(3 * (5e-6 + (2**20 / 4) / 1e11))
    inter = collective_cost("all_to_all", 2**20, [0, 8, 16, 24], hw)
    assert inter.seconds == pytest.approx(1e-5 + 3 * (2**20 / 4) / 5e10)


def test_hierarchical_allreduce_composition(hw):
    # ranks spanning two nodes: intra RS + leader AR + intra AG
    ranks = list(range(16))
    c = collective_cost("all_reduce", 2**20, ranks, hw)
    rs = collective_cost("reduce_scatter", 2**20, list(range(8)), hw).seconds
    ag = collective_cost("all_gather", 2**20, list(range(8)), hw).seconds
    inter = collective_cost("all_reduce", 2**20 // 8, [0, 8], hw).seconds
    assert c.seconds == pytest.approx(rs + inter + ag)


def test_unmapped_ranks_rejected(hw):
    with pytest.raises(TopologyError):
        collective_cost("all_reduce", 1024, [0, 1000], hw)


def test_per_link_decomposition_matches_duration(hw):
    c = collective_cost("all_reduce", 2**30, [0, 1, 2, 3], hw)
    worst = max(b for _, b in c.transfers) / 1e11
    assert c.fixed_s + worst == pytest.approx(c.seconds)
    assert len(c.transfers) == 4  # one per ring link


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def test_calibration_recovers_parameters_noiselessly(hw):
    points = [(p, s, collective_cost("all_reduce", s, list(range(p)), hw).seconds)
              for p, s in [(2, 1e8), (4, 2e8), (8, 5e8), (4, 1e9), (8, 1e7)]]
    r = calibrate_links(points)
    assert r.alpha == pytest.approx(5e-6, rel=0.01)
    assert r.bandwidth == pytest.approx(1e11, rel=0.01)
    assert r.rms_residual_s < 1e-12


def test_calibration_two_exact_points(hw):
    points = [(p, s, collective_cost("all_reduce", s, list(range(p)), hw).seconds)
              for p, s in [(2, 1e8), (8, 1e9)]]
    r = calibrate_links(points)
    assert r.alpha == pytest.approx(5e-6, rel=1e-6)
    assert r.bandwidth == pytest.approx(1e11, rel=1e-6)


def test_calibration_noisy_reports_residual(hw):
    rng = np.random.default_rng(0)
    points = []
    for p, s in [(2, 1e8), (4, 2e8), (8, 5e8), (4, 1e9), (2, 3e8), (8, 8e8)]:
        t = collective_cost("all_reduce", s, list(range(p)), hw).seconds
        points.append((p, s, t * float(1 + 0.05 * rng.standard_normal())))
    r = calibrate_links(points)
    assert r.rms_residual_s > 0.0


# ---------------------------------------------------------------------------
# Profile DB
# ---------------------------------------------------------------------------


def test_db_lookup_hit_and_miss():
    rec = ProfileRecord("dev", "matmul", "|64x64_64x64", "bf16", 1234.0, 3)
    db = ProfileDB([rec])
    assert db.lookup("dev", "matmul", "|64x64_64x64", "bf16") == 1234.0
    assert db.lookup("dev", "matmul", "|64x64_64x32", "bf16") is None


def test_db_rejects_duplicates():
    rec = ProfileRecord("dev", "matmul", "|64x64_64x64", "bf16", 1234.0, 3)
    db = ProfileDB([rec])
    with pytest.raises(ConfigError, match="duplicate"):
        db.add(ProfileRecord("dev", "matmul", "|64x64_64x64", "bf16", 99.0, 1))


def test_db_text_round_trip():
    db = ProfileDB(
        [
            ProfileRecord("dev", "matmul", "|64x64_64x64", "bf16", 1234.5, 3),
            ProfileRecord("dev", "rmsnorm", "|1x64x64", "fp32", 88.25, 9),
        ]
    )
    again = ProfileDB.from_text(db.to_text())
    assert {r.key for r in again.records()} == {r.key for r in db.records()}
    assert again.lookup("dev", "matmul", "|64x64_64x64", "bf16") == 1234.5


def test_db_requires_header():
    with pytest.raises(ConfigError, match="header"):
        ProfileDB.from_text("")
    with pytest.raises(ConfigError, match="header"):
        ProfileDB.from_text("a,b,c\n")


def test_signature_is_deterministic_and_attr_sorted(hw):
    g = OperatorGraph(
        [OpNode("at", OpKind.ATTENTION, ["q", "k", "v"], [act(1, 8, 16)],
                {"heads": 2, "causal": True, "head_dim": 8})],
        {n: act(1, 8, 16) for n in ("q", "k", "v")},
        ["at"],
    )
    sig = shape_signature(g, g.node("at"))
    assert sig == "causal=true;head_dim=8;heads=2|1x8x16_1x8x16_1x8x16"


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------


def synthetic_db(hw, kind="matmul", count=500, seed=0):
    rng = np.random.default_rng(seed)
    db = ProfileDB()
    made = attempts = 0
    while made < count and attempts < count * 50:
        attempts += 1
        m, k, n = (int(2 ** rng.integers(4, 13)) for _ in range(3))
        g = matmul_graph(m, k, n)
        sig = shape_signature(g, g.node("mm"))
        ns = roofline_time(g, g.node("mm"), hw) * 1e9
        try:
            db.add(ProfileRecord(hw.device_id, kind, sig, "bf16", ns, 1))
            made += 1
        except ConfigError:
            continue
    return db


def test_predictor_fidelity_on_synthetic_oracle(hw):
    db = synthetic_db(hw, count=500)
    predictor = train_predictor(db, "matmul", seed=42)
    assert predictor.holdout_mae <= 0.05


def test_predictor_constant_latency():
    db = ProfileDB()
    for i in range(60):
        db.add(ProfileRecord("dev", "matmul", f"|{16 * (i + 1)}x64_64x64", "bf16", 5000.0, 1))
    p = train_predictor(db, "matmul")
    for rec in db.records()[:5]:
        assert p.predict_ns(rec.shape_signature, "bf16") == pytest.approx(5000.0, rel=1e-6)


def test_predictor_refuses_small_datasets(hw):
    db = synthetic_db(hw, count=10)
    with pytest.raises(TrainingError, match="matmul"):
        train_predictor(db, "matmul")


def test_predictor_deterministic_under_seed(hw):
    db = synthetic_db(hw, count=120)
    a = train_predictor(db, "matmul", seed=7)
    b = train_predictor(db, "matmul", seed=7)
    assert a.holdout_mae == b.holdout_mae
    sig = db.records()[0].shape_signature
    assert a.predict_ns(sig, "bf16") == b.predict_ns(sig, "bf16")


def test_predictions_strictly_positive(hw):
    db = synthetic_db(hw, count=100)
    p = train_predictor(db, "matmul")
    g = matmul_graph(3, 7, 11)  # far off the training grid
    assert predict_time(g, g.node("mm"), p) > 0


def test_feature_vector_fixed_length():
    a = features_for("matmul", "|64x64_64x64", "bf16")
    b = features_for("rmsnorm", "|2x64x128", "fp32")
    assert a.shape == b.shape


# ---------------------------------------------------------------------------
# Fused dispatch
# ---------------------------------------------------------------------------


def test_dispatch_prefers_profile(hw):
    g = matmul_graph(64, 64, 64)
    sig = shape_signature(g, g.node("mm"))
    db = ProfileDB([ProfileRecord(hw.device_id, "matmul", sig, "bf16", 777.0, 1)])
    stack = build_stack(hw, db=db)
    seconds, engine = stack.dispatch(g, g.node("mm"))
    assert engine == "profile" and seconds == pytest.approx(777e-9)


def test_dispatch_falls_back_to_prediction_then_analytical(hw):
    db = synthetic_db(hw, count=80)
    predictors = {"matmul": train_predictor(db, "matmul")}
    stack = build_stack(hw, db=ProfileDB(), predictors=predictors)
    g = matmul_graph(48, 48, 48)  # not in the (empty) db
    _, engine = stack.dispatch(g, g.node("mm"))
    assert engine == "prediction"
    g2 = OperatorGraph(
        [OpNode("s", OpKind.SILU, ["a"], [act(64)])], {"a": act(64)}, ["s"]
    )
    _, engine2 = stack.dispatch(g2, g2.node("s"))
    assert engine2 == "analytical"


def test_dispatch_total_and_positive(hw):
    stack = build_stack(hw)
    g = OperatorGraph(
        [OpNode("ar", OpKind.ALL_REDUCE, ["a"], [act(256)], {"group": [0, 1, 2, 3]})],
        {"a": act(256)},
        ["ar"],
    )
    seconds, engine = stack.dispatch(g, g.node("ar"))
    assert engine == "analytical" and seconds > 0


def test_stack_requires_analytical_tail(hw):
    with pytest.raises(ConfigError):
        EngineStack([ProfileEngine(ProfileDB(), "dev")])


def test_hw_file_round_trip(hw):
    again = load_hardware(dump_hardware(hw))
    assert again.device_id == hw.device_id
    assert again.peak_flops == hw.peak_flops
    assert [t.members for t in again.topology] == [t.members for t in hw.topology]
