"""Reference decoder blocks used for offline extraction and tests.

Pure PyTorch, trace-friendly: no data-dependent shapes, constant view dims
bound at construction. The decode variant consumes past key/value tensors.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class TinyDecoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn: int, batch: int, seq: int):
        super().__init__()
        assert hidden % heads == 0
        self.heads = heads
        self.head_dim = hidden // heads
        self.batch, self.seq = batch, seq
        self.ln1 = nn.RMSNorm(hidden)
        self.q_proj = nn.Linear(hidden, hidden, bias=False)
        self.k_proj = nn.Linear(hidden, hidden, bias=False)
        self.v_proj = nn.Linear(hidden, hidden, bias=False)
        self.o_proj = nn.Linear(hidden, hidden, bias=False)
        self.ln2 = nn.RMSNorm(hidden)
        self.gate_proj = nn.Linear(hidden, ffn, bias=False)
        self.up_proj = nn.Linear(hidden, ffn, bias=False)
        self.down_proj = nn.Linear(ffn, hidden, bias=False)

    def _split(self, t: torch.Tensor, seq: int) -> torch.Tensor:
        return t.view(self.batch, seq, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        q = self._split(self.q_proj(h), self.seq)
        k = self._split(self.k_proj(h), self.seq)
        v = self._split(self.v_proj(h), self.seq)
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(self.batch, self.seq, -1)
        x = x + self.o_proj(attn)
        h = self.ln2(x)
        ff = self.down_proj(F.silu(self.gate_proj(h)) * self.up_proj(h))
        return x + ff


class TinyDecoderBlockDecode(nn.Module):
    """Single-token step against a past key/value cache."""

    def __init__(self, hidden: int, heads: int, ffn: int, batch: int, kv_len: int):
        super().__init__()
        self.block = TinyDecoderBlock(hidden, heads, ffn, batch, 1)
        self.kv_len = kv_len

    def forward(self, x, past_k, past_v):
        b = self.block
        h = b.ln1(x)
        q = b._split(b.q_proj(h), 1)
        k = torch.cat([past_k, b._split(b.k_proj(h), 1)], dim=2)
        v = torch.cat([past_v, b._split(b.v_proj(h), 1)], dim=2)
        attn = F.scaled_dot_product_attention(q, k, v)
        attn = attn.transpose(1, 2).reshape(b.batch, 1, -1)
        x = x + b.o_proj(attn)
        h = b.ln2(x)
        ff = b.down_proj(F.silu(b.gate_proj(h)) * b.up_proj(h))
        return x + ff


def build_reference(
    hidden: int = 64,
    heads: int = 8,
    ffn: int = 128,
    batch: int = 1,
    seq: int = 16,
    dtype: torch.dtype = torch.bfloat16,
) -> tuple[nn.Module, tuple[torch.Tensor, ...]]:
    m = TinyDecoderBlock(hidden, heads, ffn, batch, seq).to(dtype)
    return m, (torch.zeros(batch, seq, hidden, dtype=dtype),)


def build_reference_decode(
    hidden: int = 64,
    heads: int = 8,
    ffn: int = 128,
    batch: int = 1,
    kv_len: int = 64,
    dtype: torch.dtype = torch.bfloat16,
) -> tuple[nn.Module, tuple[torch.Tensor, ...]]:
    m = TinyDecoderBlockDecode(hidden, heads, ffn, batch, kv_len).to(dtype)
    head_dim = hidden // heads
    x = torch.zeros(batch, 1, hidden, dtype=dtype)
    pk = torch.zeros(batch, heads, kv_len, head_dim, dtype=dtype)
    pv = torch.zeros(batch, heads, kv_len, head_dim, dtype=dtype)
    return m, (x, pk, pv)
