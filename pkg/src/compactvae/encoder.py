"""Point cloud -> compact latent set.

High-resolution point features ``G`` (N x C) are squeezed through point
patches ``H`` (L x C) into compact vectors ``F`` (M x C); a KL block then
compresses channels to Gaussian latents (M x D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import EncoderConfig
from .geometry import farthest_point_sample
from .layers import CrossAttentionBlock, FourierEmbedding, SelfAttentionBlock


class EncoderBlock(nn.Module):
    """One G -> H -> F -> G round trip.

    ``H' = SelfAttn^k([cls; CrossAttn(H, G)])[1:]``,
    ``F' = SelfAttn(CrossAttn(F, H'))``, ``G' = CrossAttn(G, F')``.
    """

    def __init__(self, width: int, heads: int = 8, patch_layers: int = 3):
        super().__init__()
        self.patch_cross = CrossAttentionBlock(width, heads)
        self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.patch_self = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(patch_layers))
        self.latent_cross = CrossAttentionBlock(width, heads)
        self.latent_self = SelfAttentionBlock(width, heads)
        self.point_cross = CrossAttentionBlock(width, heads)

    def forward(self, g: torch.Tensor, h: torch.Tensor, f: torch.Tensor):
        if not g.shape[-1] == h.shape[-1] == f.shape[-1]:
            raise ValueError(f"feature widths differ: {g.shape[-1]}, {h.shape[-1]}, {f.shape[-1]}")
        h = self.patch_cross(h, g)
        h = torch.cat([self.cls_token.expand(h.shape[0], -1, -1), h], dim=1)
        for blk in self.patch_self:
            h = blk(h)
        h = h[:, 1:]
        f = self.latent_self(self.latent_cross(f, h))
        g = self.point_cross(g, f)
        return g, h, f


def anchor_indices(cloud: torch.Tensor, k: int, seed: int = 0) -> torch.Tensor:
    """FPS indices (B x k) for each cloud in the batch.

    FPS is greedy, so the first M of the L patch anchors are exactly the
    M-point FPS result; the encoder uses that prefix for the latent anchors.
    """
    pts = cloud.detach().cpu().double().numpy()
    idx = np.stack([farthest_point_sample(p, k, seed) for p in pts])
    return torch.from_numpy(idx).to(cloud.device)


class PointEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.width
        self.embed = FourierEmbedding(c, cfg.n_freqs)
        self.blocks = nn.ModuleList(
            EncoderBlock(c, cfg.heads, cfg.patch_layers) for _ in range(cfg.n_blocks))
        self.final = CrossAttentionBlock(c, cfg.heads)
        if cfg.position_mode == "learnable":
            self.patch_queries = nn.Parameter(torch.randn(cfg.n_patches, c) * 0.02)
            self.latent_queries = nn.Parameter(torch.randn(cfg.n_latents, c) * 0.02)

    def initial_sets(self, cloud: torch.Tensor, anchors: torch.Tensor | None = None, seed: int = 0):
        b = cloud.shape[0]
        g = self.embed(cloud)
        if self.cfg.position_mode == "learnable":
            h = self.patch_queries.expand(b, -1, -1)
            f = self.latent_queries.expand(b, -1, -1)
            return g, h, f
        if anchors is None:
            anchors = anchor_indices(cloud, self.cfg.n_patches, seed)
        pos_h = torch.gather(cloud, 1, anchors[..., None].expand(-1, -1, 3))
        pos_f = pos_h[:, : self.cfg.n_latents]
        return g, self.embed(pos_h), self.embed(pos_f)

    def forward(self, cloud: torch.Tensor, anchors: torch.Tensor | None = None,
                seed: int = 0) -> torch.Tensor:
        """Encode ``cloud`` (B x N x 3) into compact features (B x M x C)."""
        if cloud.shape[1] < self.cfg.n_patches:
            raise ValueError(f"cloud has {cloud.shape[1]} points, need at least {self.cfg.n_patches}")
        g, h, f = self.initial_sets(cloud, anchors, seed)
        for blk in self.blocks:
            g, h, f = blk(g, h, f)
        return self.final(f, g)


class KLBlock(nn.Module):
    """Two independent affine maps C -> D for the mean and log-variance.

    The log-variance map starts at zero so the posterior begins with unit
    variance whatever the scale of the (unnormalized) encoder features.
    """

    LOGVAR_RANGE = (-30.0, 20.0)

    def __init__(self, width: int, latent_dim: int):
        super().__init__()
        self.mu = nn.Linear(width, latent_dim)
        self.logvar = nn.Linear(width, latent_dim)
        nn.init.zeros_(self.logvar.weight)
        nn.init.zeros_(self.logvar.bias)

    def forward(self, f: torch.Tensor):
        return self.mu(f), self.logvar(f).clamp(*self.LOGVAR_RANGE)


def kl_compress(block: KLBlock, f: torch.Tensor):
    return block(f)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * logvar) * noise


@dataclass
class LatentSet:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


def encode(encoder: PointEncoder, cloud, seed: int = 0) -> torch.Tensor:
    """Single-cloud convenience wrapper: (N x 3) -> (M x C)."""
    dtype = next(encoder.parameters()).dtype
    pts = cloud if torch.is_tensor(cloud) else torch.as_tensor(np.asarray(cloud), dtype=dtype)
    return encoder(pts[None], seed=seed)[0]
