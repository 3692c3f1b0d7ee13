import pytest
from hypothesis import given, settings, strategies as st

from charon.blocks import ModelConfig, MoEConfig, build_dense_block, build_moe_block, model_flops
from charon.ir import ConfigError, OpKind, TensorRole


def test_q_proj_shape(tiny_cfg):
    g = build_dense_block(tiny_cfg)
    assert g.node("q_proj").outputs[0].shape == (1, 4, 8)


def test_block_multiplier_follows_layers(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.__dict__, "num_layers": 32, "moe": None})
    assert build_dense_block(cfg).block_multiplier == 32


def test_llama_style_weight_param_count():
    cfg = ModelConfig(
        hidden_size=4096, num_heads=32, num_kv_heads=32, head_dim=128,
        ffn_hidden=14336, num_layers=32, vocab_size=128256, batch=1, seq_len=8192,
    )
    g = build_dense_block(cfg)
    # 4 square attention projections plus 3 FFN matrices, summed by hand
    assert g.weight_params() == 4 * 4096**2 + 3 * 4096 * 14336 == 243_269_632


def test_inconsistent_dims_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(
            hidden_size=10, num_heads=2, num_kv_heads=2, head_dim=4, ffn_hidden=16,
            num_layers=1, vocab_size=32, batch=1, seq_len=4,
        )


def test_dense_rejects_moe_config(moe_cfg):
    with pytest.raises(ConfigError):
        build_dense_block(moe_cfg)


def test_moe_tokens_per_expert():
    cfg = ModelConfig(
        hidden_size=8, num_heads=2, num_kv_heads=2, head_dim=4, ffn_hidden=16,
        num_layers=1, vocab_size=32, batch=1, seq_len=8,
        moe=MoEConfig(num_experts=4, top_k=2, expert_ffn_hidden=16),
    )
    g = build_moe_block(cfg)
    assert g.node("router").attrs["tokens_per_expert"] == 4  # 8*2/4


def test_moe_expert_input_extent():
    cfg = ModelConfig(
        hidden_size=64, num_heads=8, num_kv_heads=8, head_dim=8, ffn_hidden=64,
        num_layers=1, vocab_size=64, batch=1, seq_len=1024,
        moe=MoEConfig(num_experts=8, top_k=2, expert_ffn_hidden=64),
    )
    g = build_moe_block(cfg)
    assert g.node("exp0_gate_proj").outputs[0].shape[0] == 256  # 1024*2/8


def test_degenerate_moe_equals_dense(tiny_cfg):
    moe = ModelConfig(
        **{**tiny_cfg.__dict__, "moe": MoEConfig(1, 1, tiny_cfg.ffn_hidden)}
    )
    assert build_moe_block(moe).flops() == build_dense_block(tiny_cfg).flops()


def test_top_k_bound():
    with pytest.raises(ConfigError):
        MoEConfig and ModelConfig(
            hidden_size=8, num_heads=2, num_kv_heads=2, head_dim=4, ffn_hidden=16,
            num_layers=1, vocab_size=32, batch=1, seq_len=4,
            moe=MoEConfig(num_experts=2, top_k=3, expert_ffn_hidden=8),
        )


def test_decode_graph_carries_kv_cache(tiny_cfg):
    g = build_dense_block(tiny_cfg, kv_len=64)
    roles = {t.role for t in g.graph_inputs.values()}
    assert TensorRole.KV_CACHE in roles
    assert g.node("attn").attrs["kv_len"] == 64 + tiny_cfg.seq_len


def test_model_flops_scales_by_multiplier(tiny_cfg):
    g = build_dense_block(tiny_cfg)
    assert model_flops(g) == g.model_flops() * tiny_cfg.num_layers
    with_head = model_flops(g, tiny_cfg, include_embedding_head=True)
    assert with_head > model_flops(g)


@settings(max_examples=25, deadline=None)
@given(
    heads=st.sampled_from([1, 2, 4]),
    head_dim=st.sampled_from([4, 8]),
    ffn=st.sampled_from([8, 16, 32]),
    seq=st.sampled_from([2, 4, 8]),
    layers=st.integers(min_value=1, max_value=6),
)
def test_dense_block_always_validates(heads, head_dim, ffn, seq, layers):
    cfg = ModelConfig(
        hidden_size=heads * head_dim, num_heads=heads, num_kv_heads=heads,
        head_dim=head_dim, ffn_hidden=ffn, num_layers=layers, vocab_size=16,
        batch=1, seq_len=seq,
    )
    g = build_dense_block(cfg)
    g.validate()
    assert g.block_multiplier == layers
    assert all(n.kind != OpKind.NOOP for n in g.nodes)
