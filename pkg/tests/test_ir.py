import pytest
from hypothesis import given, strategies as st

from charon.ir import (
    GraphError,
    OperatorGraph,
    OpKind,
    OpNode,
    Precision,
    TensorMeta,
    TensorRole,
    comm_payload_bytes,
    op_bytes,
    op_flops,
)


def act(*shape, precision=Precision.BF16):
    return TensorMeta(tuple(shape), precision)


def test_element_sizes():
    sizes = {
        Precision.FP32: 4, Precision.BF16: 2, Precision.FP16: 2,
        Precision.FP8: 1, Precision.INT8: 1,
    }
    for prec, size in sizes.items():
        t = TensorMeta((3, 5), prec)
        assert t.bytes == 15 * size


def test_nonpositive_extent_rejected():
    with pytest.raises(GraphError):
        TensorMeta((4, 0))


@given(st.lists(st.integers(min_value=1, max_value=64), min_size=1, max_size=4),
       st.sampled_from(list(Precision)))
def test_byte_size_is_product_times_element_size(shape, precision):
    t = TensorMeta(tuple(shape), precision)
    prod = 1
    for d in shape:
        prod *= d
    assert t.bytes == prod * {"fp32": 4, "bf16": 2, "fp16": 2, "fp8": 1, "int8": 1}[precision.value]


def matmul_graph(m, k, n, precision=Precision.BF16):
    g = OperatorGraph(
        [OpNode("mm", OpKind.MATMUL, ["a", "b"], [act(m, n, precision=precision)])],
        {"a": act(m, k, precision=precision), "b": act(k, n, precision=precision)},
        ["mm"],
    )
    g.validate()
    return g


def test_matmul_flops_and_bytes():
    g = matmul_graph(4096, 4096, 4096)
    n = g.node("mm")
    assert op_flops(g, n) == 2 * 4096**3 == 137_438_953_472
    assert op_bytes(g, n) == 3 * 4096 * 4096 * 2 == 100_663_296


def test_elementwise_add_costs():
    g = OperatorGraph(
        [OpNode("add", OpKind.ADD, ["a", "b"], [act(1_000_000, precision=Precision.FP32)])],
        {"a": act(1_000_000, precision=Precision.FP32),
         "b": act(1_000_000, precision=Precision.FP32)},
        ["add"],
    )
    n = g.node("add")
    assert op_flops(g, n) == 1_000_000
    assert op_bytes(g, n) == 12_000_000


def test_noop_costs_nothing():
    g = OperatorGraph(
        [OpNode("v", OpKind.NOOP, ["a"], [act(8)])], {"a": act(8)}, ["v"]
    )
    assert op_flops(g, g.node("v")) == 0
    assert op_bytes(g, g.node("v")) == 0


def test_attention_flops_causal_halving():
    q = act(2, 64, 32)
    g = OperatorGraph(
        [OpNode("at", OpKind.ATTENTION, ["q", "k", "v"], [act(2, 64, 32)],
                {"heads": 4, "head_dim": 8, "causal": True})],
        {"q": q, "k": q, "v": q},
        ["at"],
    )
    n = g.node("at")
    full = 4 * 2 * 4 * 64 * 64 * 8
    assert op_flops(g, n) == full // 2
    n.attrs["count_full_scores"] = True
    assert op_flops(g, n) == full
    del n.attrs["count_full_scores"]
    n.attrs["grad"] = True
    assert op_flops(g, n) == full  # 2x the causal forward


def test_comm_payload_is_max_side():
    g = OperatorGraph(
        [OpNode("ag", OpKind.ALL_GATHER, ["a"], [act(4, 16)], {"group": [0, 1, 2, 3]})],
        {"a": act(1, 16)},
        ["ag"],
    )
    n = g.node("ag")
    assert op_flops(g, n) == 0
    assert comm_payload_bytes(g, n) == 4 * 16 * 2


def test_validate_rejects_dangling_ref():
    g = OperatorGraph(
        [OpNode("mm", OpKind.MATMUL, ["a", "ghost"], [act(2, 2)])],
        {"a": act(2, 2)},
        ["mm"],
    )
    with pytest.raises(GraphError, match="ghost"):
        g.validate()


def test_validate_rejects_forward_reference():
    nodes = [
        OpNode("b", OpKind.SILU, ["a"], [act(4)]),
        OpNode("a", OpKind.SILU, ["x"], [act(4)]),
    ]
    g = OperatorGraph(nodes, {"x": act(4)}, ["b"])
    with pytest.raises(GraphError):
        g.validate()


def test_validate_requires_comm_group():
    g = OperatorGraph(
        [OpNode("ar", OpKind.ALL_REDUCE, ["a"], [act(4)])], {"a": act(4)}, ["ar"]
    )
    with pytest.raises(GraphError, match="group"):
        g.validate()


def test_flops_additivity():
    g = OperatorGraph(
        [
            OpNode("m1", OpKind.MATMUL, ["a", "b"], [act(8, 8)]),
            OpNode("s", OpKind.SILU, ["m1"], [act(8, 8)]),
            OpNode("m2", OpKind.MATMUL, ["s", "b"], [act(8, 8)]),
        ],
        {"a": act(8, 8), "b": act(8, 8)},
        ["m2"],
    )
    g.validate()
    assert g.flops() == sum(op_flops(g, n) for n in g.nodes)


def test_fused_flops_from_attr():
    g = OperatorGraph(
        [OpNode("f", OpKind.FUSED, ["a"], [act(8)], {"kinds": ["silu", "mul"], "flops": 123})],
        {"a": act(8)},
        ["f"],
    )
    assert op_flops(g, g.node("f")) == 123
