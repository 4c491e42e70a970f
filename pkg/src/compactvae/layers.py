"""Pre-norm attention blocks shared by the encoder, decoder and denoiser."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int = 8, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(kv_dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, c = x.shape
        h = self.heads
        q = self.to_q(x).view(b, n, h, c // h).transpose(1, 2)
        k, v = self.to_kv(context).view(b, context.shape[1], 2, h, c // h).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 8, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Queries ``x`` attend to ``context``; residual on the query stream.

    An empty context (zero keys) returns ``x`` unchanged.
    """

    def __init__(self, dim: int, heads: int = 8, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != context.shape[-1]:
            raise ValueError(f"width mismatch: {x.shape[-1]} vs {context.shape[-1]}")
        if context.shape[1] == 0:
            return x
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        return x + self.mlp(self.norm2(x))


class FourierEmbedding(nn.Module):
    """Learned random-frequency features of 3D positions, then a linear map.

    ``[sin(pB), cos(pB), p] -> Linear -> C``; the frequency matrix ``B`` is a
    trainable parameter initialised from a Gaussian.
    """

    def __init__(self, dim: int, n_freqs: int = 48, scale: float = 2.0 * math.pi):
        super().__init__()
        self.freqs = nn.Parameter(torch.randn(3, n_freqs) * scale)
        self.linear = nn.Linear(2 * n_freqs + 3, dim)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        proj = pos @ self.freqs
        return self.linear(torch.cat([proj.sin(), proj.cos(), pos], dim=-1))


def layer_norm_plain(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-vector standardisation without learned scale or shift."""
    return F.layer_norm(x, x.shape[-1:], eps=eps)
