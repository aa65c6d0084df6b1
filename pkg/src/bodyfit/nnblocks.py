"""Small transformer pieces shared by the landmark and scale predictors.

Attention is written out explicitly (projections, scaled dot product,
softmax) because callers need the softmax maps, not just the output.
"""

from __future__ import annotations

import torch
from torch import nn


def build_mlp(dims) -> nn.Sequential:
    """Linear stack with GELU between layers, none after the last."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("mlp needs at least input and output dims")
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention returning its softmax maps.

    `kv_dim` lets keys/values come from a space of different width than
    the queries (used by the image branch).
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyvalue: torch.Tensor):
        b, m, _ = query.shape
        n = keyvalue.shape[1]
        h, d = self.heads, self.head_dim
        q = self.q_proj(query).view(b, m, h, d).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, n, h, d).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, n, h, d).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-1, -2)) / d**0.5
        maps = torch.softmax(scores, dim=-1)
        out = torch.matmul(maps, v).transpose(1, 2).reshape(b, m, h * d)
        return self.out_proj(out), maps


class EncoderBlock(nn.Module):
    """Pre-norm residual self-attention block with a feed-forward tail."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = build_mlp((dim, ffn_mult * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h)
        x = x + a
        return x + self.ffn(self.norm2(x))
