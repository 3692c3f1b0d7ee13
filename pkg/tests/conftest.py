import math

import pytest

from charon.blocks import ModelConfig, MoEConfig
from charon.hardware import HardwareSpec, LinkTier
from charon.ir import Precision


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        hidden_size=8, num_heads=2, num_kv_heads=2, head_dim=4, ffn_hidden=16,
        num_layers=2, vocab_size=32, batch=1, seq_len=4,
    )


@pytest.fixture
def small_cfg():
    return ModelConfig(
        hidden_size=64, num_heads=8, num_kv_heads=8, head_dim=8, ffn_hidden=128,
        num_layers=2, vocab_size=64, batch=2, seq_len=16,
    )


@pytest.fixture
def moe_cfg():
    return ModelConfig(
        hidden_size=32, num_heads=4, num_kv_heads=4, head_dim=8, ffn_hidden=64,
        num_layers=2, vocab_size=64, batch=2, seq_len=16,
        moe=MoEConfig(num_experts=8, top_k=2, expert_ffn_hidden=64),
    )


@pytest.fixture
def hw():
    """Reference device: 1e14 BF16 FLOP/s, 2e12 B/s, ring of 8 at 1e11/5us."""
    return HardwareSpec(
        device_id="test-gpu",
        peak_flops={
            Precision.FP32: 1e14,
            Precision.BF16: 1e14,
            Precision.FP16: 1e14,
            Precision.FP8: 2e14,
            Precision.INT8: 2e14,
        },
        memory_bandwidth=2e12,
        memory_capacity=8e10,
        launch_overhead=0.0,
        tdp=700.0,
        topology=[
            *(LinkTier("ring", tuple(range(base, base + 8)), 5e-6, 1e11) for base in range(0, 64, 8)),
            LinkTier("switch", tuple(range(0, 64, 8)), 1e-5, 5e10),
        ],
    )


@pytest.fixture
def zero_comm_hw():
    """Free links: exact pipeline oracles without transfer noise."""
    return HardwareSpec(
        device_id="zero-comm",
        peak_flops={Precision.FP32: 1e12, Precision.BF16: 1e12},
        memory_bandwidth=1e12,
        memory_capacity=1e12,
        launch_overhead=0.0,
        tdp=0.0,
        topology=[LinkTier("ring", tuple(range(64)), 0.0, math.inf)],
    )
