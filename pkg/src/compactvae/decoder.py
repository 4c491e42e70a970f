"""Latent set -> dense triplane, with uncertainty-guided token pruning.

Token layout: token ``t = plane * g**2 + row * g + col`` with ``g = R // f``
and planes ordered (xy, yz, xz). Each token owns an ``f x f`` patch of its
plane. Triplanes are stored as ``(B, 3, C_t, R, R)``; on plane ``xy`` columns
follow x and rows follow y, on ``yz`` columns follow y and rows z, on ``xz``
columns follow x and rows z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import DecoderConfig
from .layers import CrossAttentionBlock, SelfAttentionBlock

PLANES = ("xy", "yz", "xz")


class LatentDecoder(nn.Module):
    """Channel decompression D -> C followed by self-attention."""

    def __init__(self, latent_dim: int, width: int, n_layers: int = 2, heads: int = 8):
        super().__init__()
        self.proj = nn.Linear(latent_dim, width)
        self.layers = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(n_layers))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.proj(z)
        for blk in self.layers:
            x = blk(x)
        return x


def token_count(resolution: int, patch_size: int) -> int:
    return 3 * (resolution // patch_size) ** 2


def keep_count(n_tokens: int, keep_ratio: float) -> int:
    """round(keep_ratio * T), halves rounded up."""
    return int(math.floor(keep_ratio * n_tokens + 0.5))


def prune_tokens(logits: torch.Tensor, keep_ratio: float):
    """Split token indices into (kept, pruned) by descending uncertainty.

    Works on ``(T,)`` or ``(B, T)`` logits. Ties go to the lower index. Both
    index sets come back sorted ascending.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    k = keep_count(logits.shape[-1], keep_ratio)
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    kept = torch.sort(order[..., :k], dim=-1).values
    pruned = torch.sort(order[..., k:], dim=-1).values
    return kept, pruned


def gather_tokens(tokens: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(tokens, 1, idx[..., None].expand(-1, -1, tokens.shape[-1]))


def tokens_to_planes(x: torch.Tensor, resolution: int, patch_size: int) -> torch.Tensor:
    """(B, T, f*f*C_t) patch vectors -> (B, 3, C_t, R, R) planes."""
    b = x.shape[0]
    g, f = resolution // patch_size, patch_size
    ct = x.shape[-1] // (f * f)
    x = x.view(b, 3, g, g, f, f, ct)  # plane, token row, token col, pixel row, pixel col, ch
    return x.permute(0, 1, 6, 2, 4, 3, 5).reshape(b, 3, ct, resolution, resolution)


def logits_to_grid(logits: torch.Tensor, resolution: int, patch_size: int) -> torch.Tensor:
    """(B, T) token logits -> (B, 3, g, g) per-plane grids."""
    g = resolution // patch_size
    return logits.view(logits.shape[0], 3, g, g)


@dataclass
class DecoderOutput:
    planes: torch.Tensor  # final triplane (B, 3, C_t, R, R)
    base_planes: torch.Tensor  # projection of the initial tokens only
    logits: torch.Tensor  # (B, T) uncertainty logits
    kept: torch.Tensor | None  # (B, k) kept token indices, None without pruning


class TriplaneDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, width: int, heads: int = 8):
        super().__init__()
        self.cfg = cfg
        self.n_tokens = token_count(cfg.resolution, cfg.patch_size)
        patch_dim = cfg.patch_size ** 2 * cfg.channels
        self.token_queries = nn.Parameter(torch.randn(self.n_tokens, width) * 0.02)
        self.init_cross = CrossAttentionBlock(width, heads)
        self.uncertainty_head = nn.Sequential(
            nn.LayerNorm(width), nn.Linear(width, width), nn.GELU(), nn.Linear(width, 1))
        self.mask_token = nn.Parameter(torch.randn(width) * 0.02)
        self.merge_queries = nn.Parameter(torch.randn(cfg.n_merged, width) * 0.02)
        self.merge_cross = CrossAttentionBlock(width, heads)
        self.layers = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(cfg.n_layers))
        self.norm_out = nn.LayerNorm(width)
        self.to_base = nn.Linear(width, patch_dim)
        self.to_delta = nn.Linear(width, patch_dim)

    # -- stages ---------------------------------------------------------------
    def init_tokens(self, latents: torch.Tensor) -> torch.Tensor:
        queries = self.token_queries.expand(latents.shape[0], -1, -1)
        return self.init_cross(queries, latents)

    def predict_uncertainty(self, tokens: torch.Tensor) -> torch.Tensor:
        # the head learns from its own loss only; no gradient into the tokens
        return self.uncertainty_head(tokens.detach()).squeeze(-1)

    def merge_pruned(self, pruned_tokens: torch.Tensor) -> torch.Tensor:
        queries = self.merge_queries.expand(pruned_tokens.shape[0], -1, -1)
        return self.merge_cross(queries, pruned_tokens)

    def transform(self, kept_tokens: torch.Tensor, latents: torch.Tensor,
                  merged: torch.Tensor) -> torch.Tensor:
        k = kept_tokens.shape[1]
        x = torch.cat([kept_tokens + self.mask_token, latents, merged], dim=1)
        for blk in self.layers:
            x = blk(x)
        return self.norm_out(x[:, :k])

    def assemble(self, initial_tokens: torch.Tensor, processed: torch.Tensor,
                 kept: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        """base + sigmoid(logits) * scatter(delta), all at full resolution."""
        r, f = self.cfg.resolution, self.cfg.patch_size
        if kept.shape[1] and (torch.sort(kept, dim=-1).values.diff(dim=-1) == 0).any():
            raise ValueError("duplicate indices in kept tokens")
        base = tokens_to_planes(self.to_base(initial_tokens), r, f)
        delta = self.to_delta(processed)
        full = delta.new_zeros(delta.shape[0], self.n_tokens, delta.shape[-1])
        full = full.scatter(1, kept[..., None].expand(-1, -1, delta.shape[-1]), delta)
        weights = _upsample(torch.sigmoid(logits_to_grid(logits, r, f)), f)
        return base + weights * tokens_to_planes(full, r, f)

    # -- full passes ----------------------------------------------------------
    def forward(self, latents: torch.Tensor, keep_ratio: float | None = None) -> DecoderOutput:
        keep_ratio = self.cfg.keep_ratio if keep_ratio is None else keep_ratio
        tokens = self.init_tokens(latents)
        logits = self.predict_uncertainty(tokens)
        kept, pruned = prune_tokens(logits, keep_ratio)
        merged = self.merge_pruned(gather_tokens(tokens, pruned))
        processed = self.transform(gather_tokens(tokens, kept), latents, merged)
        planes = self.assemble(tokens, processed, kept, logits)
        base = tokens_to_planes(self.to_base(tokens), self.cfg.resolution, self.cfg.patch_size)
        return DecoderOutput(planes, base, logits, kept)

    def forward_unpruned(self, latents: torch.Tensor) -> DecoderOutput:
        """Reference path with every token processed: no gather, no scatter."""
        r, f = self.cfg.resolution, self.cfg.patch_size
        tokens = self.init_tokens(latents)
        logits = self.predict_uncertainty(tokens)
        merged = self.merge_queries.expand(latents.shape[0], -1, -1)
        processed = self.transform(tokens, latents, merged)
        base = tokens_to_planes(self.to_base(tokens), r, f)
        weights = _upsample(torch.sigmoid(logits_to_grid(logits, r, f)), f)
        planes = base + weights * tokens_to_planes(self.to_delta(processed), r, f)
        return DecoderOutput(planes, base, logits, None)


def _upsample(grid: torch.Tensor, f: int) -> torch.Tensor:
    """(B, 3, g, g) -> (B, 3, 1, R, R) by nearest (block) upsampling."""
    return grid.repeat_interleave(f, dim=-2).repeat_interleave(f, dim=-1).unsqueeze(2)
