"""Full shape VAE: encoder, KL block, latent decoder, triplane decoder, field MLP."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .decoder import DecoderOutput, LatentDecoder, TriplaneDecoder
from .encoder import KLBlock, PointEncoder, reparameterize
from .fields import OccupancyField, OccupancyMLP, occupancy_logits

# parameter groups trained in each stage
AE_MODULES = ("encoder", "decoder", "field_mlp")
VAE_MODULES = ("kl", "latent_decoder")


class ShapeVAE(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        e, d, fl = cfg.encoder, cfg.decoder, cfg.fields
        self.encoder = PointEncoder(e)
        self.kl = KLBlock(e.width, e.latent_dim)
        self.latent_decoder = LatentDecoder(e.latent_dim, e.width, d.latent_layers, e.heads)
        self.decoder = TriplaneDecoder(d, e.width, e.heads)
        self.field_mlp = OccupancyMLP(d.channels, fl.hidden, fl.depth)

    @classmethod
    def from_seed(cls, cfg: Config, seed: int = 0) -> "ShapeVAE":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(cfg)

    def parameters_of(self, modules) -> list[nn.Parameter]:
        return [p for m in modules for p in getattr(self, m).parameters()]

    def named_parameters_of(self, modules) -> list[tuple[str, nn.Parameter]]:
        return [(f"{m}.{n}", p) for m in modules for n, p in getattr(self, m).named_parameters()]

    # -- pipeline pieces ----------------------------------------------------------
    def encode_features(self, cloud: torch.Tensor, anchors=None, seed: int = 0) -> torch.Tensor:
        return self.encoder(cloud, anchors, seed)

    def posterior(self, features: torch.Tensor):
        return self.kl(features)

    def sample_latents(self, features: torch.Tensor, noise: torch.Tensor | None = None):
        """(mu, logvar, z); ``noise=None`` means z = mu (deterministic evaluation)."""
        mu, logvar = self.kl(features)
        z = mu if noise is None else reparameterize(mu, logvar, noise)
        return mu, logvar, z

    def decode(self, latents: torch.Tensor, keep_ratio: float | None = None,
               prune: bool = True) -> DecoderOutput:
        """Decompressed features F' (B x M x C) -> triplanes."""
        if prune:
            return self.decoder(latents, keep_ratio)
        return self.decoder.forward_unpruned(latents)

    def decode_latents(self, z: torch.Tensor, **kw) -> DecoderOutput:
        return self.decode(self.latent_decoder(z), **kw)

    def logits(self, planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        return occupancy_logits(planes, self.field_mlp, points)

    def field(self, planes: torch.Tensor) -> OccupancyField:
        """Occupancy field for a single (3, C_t, R, R) triplane."""
        return OccupancyField(planes, self.field_mlp)

    @torch.no_grad()
    def reconstruct_planes(self, cloud, variational: bool, seed: int = 0,
                           noise: torch.Tensor | None = None) -> torch.Tensor:
        """Triplanes for a batch of clouds; ``variational`` routes through the KL path."""
        dtype = next(self.parameters()).dtype
        cloud = torch.as_tensor(np.asarray(cloud), dtype=dtype)
        if cloud.dim() == 2:
            cloud = cloud[None]
        feats = self.encode_features(cloud, seed=seed)
        if variational:
            _, _, z = self.sample_latents(feats, noise)
            feats = self.latent_decoder(z)
        return self.decode(feats).planes
