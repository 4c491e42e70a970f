"""EDM latent diffusion over M x D latent sets.

The denoiser is a pre-norm transformer over the M latent tokens (plus one
conditioning token) wrapped in EDM preconditioning. Latents are standardized
per channel before diffusion; the statistics travel with the checkpoint.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_state, rng_arrays, state_to_arrays
from .config import Config, DiffusionConfig
from .errors import ConfigError, DataError, NumericError
from .fields import dense_grid_eval, extract_mesh, multires_grid_eval
from .geometry import Mesh, ProceduralShape, sample_surface_points
from .layers import SelfAttentionBlock

NORMALIZATION = "per-channel-standardize"


def edm_coefficients(sigma, sigma_data: float = 1.0):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    sigma = torch.as_tensor(sigma)
    s2, d2 = sigma ** 2, sigma_data ** 2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / torch.sqrt(s2 + d2)
    c_in = 1.0 / torch.sqrt(s2 + d2)
    c_noise = torch.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = 1.0):
    sigma = torch.as_tensor(sigma)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def timestep_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
    args = x[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class DenoiserNet(nn.Module):
    """Pre-norm transformer F(c_in x, c_noise, class) over M latent slots."""

    def __init__(self, n_latents: int, latent_dim: int, width: int = 256, n_layers: int = 8,
                 heads: int = 8, n_classes: int = 0):
        super().__init__()
        self.n_latents, self.latent_dim, self.n_classes = n_latents, latent_dim, n_classes
        self.width = width
        self.proj_in = nn.Linear(latent_dim, width)
        self.pos = nn.Parameter(torch.randn(n_latents, width) * 0.02)
        self.noise_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        if n_classes > 0:
            self.class_embed = nn.Embedding(n_classes, width)
            nn.init.zeros_(self.class_embed.weight)
        self.layers = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(n_layers))
        self.norm_out = nn.LayerNorm(width)
        self.proj_out = nn.Linear(width, latent_dim)

    def check_class(self, class_id) -> None:
        if class_id is None:
            return
        ids = torch.as_tensor(class_id)
        if self.n_classes == 0:
            raise ValueError("model is unconditional; class_id must be None")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.n_classes):
            raise ValueError(f"class_id out of range [0, {self.n_classes})")

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor, class_id=None) -> torch.Tensor:
        b, m, _ = x.shape
        if m != self.n_latents:
            raise ValueError(f"expected {self.n_latents} latent tokens, got {m}")
        cond = self.noise_mlp(timestep_embedding(c_noise.reshape(-1).expand(b), self.width).to(x.dtype))
        if class_id is not None:
            self.check_class(class_id)
            ids = torch.as_tensor(class_id, dtype=torch.long).reshape(-1).expand(b)
            cond = cond + self.class_embed(ids)
        h = torch.cat([cond[:, None], self.proj_in(x) + self.pos], dim=1)
        for blk in self.layers:
            h = blk(h)
        return self.proj_out(self.norm_out(h[:, 1:]))


class EDMDenoiser(nn.Module):
    """D(x; sigma) = c_skip x + c_out F(c_in x, c_noise)."""

    def __init__(self, net: DenoiserNet, sigma_data: float = 1.0):
        super().__init__()
        self.net = net
        self.sigma_data = float(sigma_data)

    def forward(self, x: torch.Tensor, sigma, class_id=None) -> torch.Tensor:
        sigma = torch.as_tensor(sigma, dtype=x.dtype)
        if bool((sigma <= 0).any()):
            raise ValueError("sigma must be positive")
        sigma = sigma.reshape(-1).expand(x.shape[0])
        c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, self.sigma_data)
        s = (-1, 1, 1)
        f = self.net(c_in.view(s) * x, c_noise, class_id)
        return c_skip.view(s) * x + c_out.view(s) * f


def build_denoiser(dc: DiffusionConfig, n_latents: int, latent_dim: int,
                   sigma_data: float = 1.0) -> EDMDenoiser:
    net = DenoiserNet(n_latents, latent_dim, dc.width, dc.n_layers, dc.heads, dc.n_classes)
    return EDMDenoiser(net, sigma_data)


def diffusion_loss(denoiser: nn.Module, z0: torch.Tensor, noise: torch.Tensor, sigma,
                   class_id=None, sigma_data: float | None = None) -> torch.Tensor:
    """Weighted squared error of the denoised estimate (mean over all entries)."""
    sd = getattr(denoiser, "sigma_data", 1.0) if sigma_data is None else sigma_data
    sigma = torch.as_tensor(sigma, dtype=z0.dtype).reshape(-1).expand(z0.shape[0])
    pred = denoiser(z0 + sigma.view(-1, 1, 1) * noise, sigma, class_id)
    w = loss_weight(sigma, sd).view(-1, 1, 1)
    return (w * (pred - z0) ** 2).mean()


def sample_sigma(n: int, p_mean: float, p_std: float, generator: torch.Generator,
                 dtype=torch.float32) -> torch.Tensor:
    return torch.exp(p_mean + p_std * torch.randn(n, generator=generator, dtype=dtype))


def sigma_ladder(steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0,
                 rho: float = 7.0) -> np.ndarray:
    """rho-spaced noise levels from sigma_max down to sigma_min, then a final 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([sigma_max, 0.0])
    i = np.arange(steps, dtype=np.float64)
    a, b = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
    t = (a + i / (steps - 1) * (b - a)) ** rho
    return np.append(t, 0.0)


class CountingDenoiser:
    """Wraps a denoiser callable and counts evaluations."""

    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, x, sigma, class_id=None):
        self.calls += 1
        return self.fn(x, sigma, class_id)


@torch.no_grad()
def edm_sample(denoiser, x_init: torch.Tensor, steps: int, sigma_min: float = 0.002,
               sigma_max: float = 80.0, rho: float = 7.0, class_id=None,
               method: str = "heun") -> torch.Tensor:
    """Deterministic probability-flow ODE solve starting at ``x_init`` (already at sigma_max).

    Heun uses 2*steps - 1 denoiser evaluations (the final step to sigma=0 is
    a plain Euler step); Euler uses ``steps``.
    """
    if method not in ("heun", "euler"):
        raise ValueError(f"unknown sampler {method!r}")
    t = sigma_ladder(steps, sigma_min, sigma_max, rho)
    x = x_init
    for i in range(steps):
        t_cur, t_next = float(t[i]), float(t[i + 1])
        d = (x - denoiser(x, t_cur, class_id)) / t_cur
        x_next = x + (t_next - t_cur) * d
        if method == "heun" and t_next > 0:
            d2 = (x_next - denoiser(x_next, t_next, class_id)) / t_next
            x_next = x + (t_next - t_cur) * (0.5 * d + 0.5 * d2)
        x = x_next
    return x


# -- latent statistics ------------------------------------------------------------

@dataclass
class LatentStats:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)

    @classmethod
    def fit(cls, latents: np.ndarray, eps: float = 1e-6) -> "LatentStats":
        flat = np.asarray(latents, dtype=np.float64).reshape(-1, latents.shape[-1])
        return cls(flat.mean(0).astype(np.float32), np.maximum(flat.std(0), eps).astype(np.float32))

    def normalize(self, z):
        return (z - torch.as_tensor(self.mean)) / torch.as_tensor(self.std)

    def denormalize(self, z):
        return z * torch.as_tensor(self.std) + torch.as_tensor(self.mean)


@dataclass
class LatentSample:
    z: torch.Tensor  # M x D, VAE latent space
    class_id: int | None = None


@dataclass
class DiffusionModel:
    denoiser: EDMDenoiser
    stats: LatentStats
    config: Config
    vae_hash: str = ""
    history: list[dict] = field(default_factory=list)

    @property
    def sigma_data(self) -> float:
        return self.denoiser.sigma_data

    def to_checkpoint(self, step: int = 0) -> Checkpoint:
        arrays = state_to_arrays(self.denoiser, "denoiser.")
        arrays["stats.mean"] = np.asarray(self.stats.mean, np.float32)
        arrays["stats.std"] = np.asarray(self.stats.std, np.float32)
        arrays.update(rng_arrays())
        net = self.denoiser.net
        meta = {"kind": "diffusion", "stage": "diffusion", "step": step,
                "config": self.config.to_dict(), "sigma_data": self.sigma_data,
                "vae_hash": self.vae_hash, "normalization": NORMALIZATION,
                "n_latents": net.n_latents, "latent_dim": net.latent_dim}
        return Checkpoint(arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DiffusionModel":
        if ckpt.meta.get("kind") != "diffusion":
            raise ConfigError("not a diffusion checkpoint")
        cfg = Config.from_dict(ckpt.config)
        den = build_denoiser(cfg.diffusion, ckpt.meta["n_latents"], ckpt.meta["latent_dim"],
                             ckpt.meta["sigma_data"])
        load_state(den, ckpt.subset("denoiser."))
        stats = LatentStats(ckpt.arrays["stats.mean"], ckpt.arrays["stats.std"])
        return cls(den, stats, cfg, ckpt.meta.get("vae_hash", ""))

    def sample(self, n: int, steps: int | None = None, class_id=None, seed: int = 0,
               method: str = "heun") -> torch.Tensor:
        """``n`` latent sets (n, M, D) in the VAE's latent space."""
        dc = self.config.diffusion
        steps = dc.sampling_steps if steps is None else steps
        return sample_latents(self.denoiser, self.stats, n, steps, class_id, seed,
                              dc.sigma_min, dc.sigma_max, dc.rho, method)


def sample_latents(denoiser: EDMDenoiser, stats: LatentStats | None, n: int, steps: int,
                   class_id=None, seed: int = 0, sigma_min: float = 0.002,
                   sigma_max: float = 80.0, rho: float = 7.0, method: str = "heun") -> torch.Tensor:
    net = denoiser.net
    if class_id is not None:
        net.check_class(class_id)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(denoiser.parameters()).dtype
    noise = torch.randn(n, net.n_latents, net.latent_dim, generator=gen, dtype=dtype)
    was_training = denoiser.training
    denoiser.eval()
    x = edm_sample(denoiser, noise * sigma_max, steps, sigma_min, sigma_max, rho, class_id, method)
    denoiser.train(was_training)
    return stats.denormalize(x) if stats is not None else x


# -- training ---------------------------------------------------------------------

@torch.no_grad()
def encode_latents(vae, shapes: Sequence[ProceduralShape], seed: int = 0) -> np.ndarray:
    """Posterior means (S, M, D) of each shape's surface cloud."""
    cfg = vae.cfg
    out = []
    for i, shape in enumerate(shapes):
        cloud = torch.as_tensor(sample_surface_points(shape, cfg.encoder.n_points, seed + i),
                                dtype=torch.float32)[None]
        mu, _ = vae.posterior(vae.encode_features(cloud, seed=seed))
        out.append(mu[0].numpy())
    return np.stack(out)


def train_diffusion(cfg: Config, latents: np.ndarray, class_ids: np.ndarray | None = None,
                    steps: int | None = None, vae_hash: str = "",
                    callback=None) -> DiffusionModel:
    """Fit the denoiser to a fixed latent set (S, M, D)."""
    dc = cfg.diffusion
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 3:
        raise DataError(f"latents must be (S, M, D), got shape {latents.shape}")
    if latents.shape[1:] != (cfg.encoder.n_latents, cfg.encoder.latent_dim):
        raise ConfigError(f"latent shape {latents.shape[1:]} does not match encoder.n_latents x "
                          f"encoder.latent_dim ({cfg.encoder.n_latents}, {cfg.encoder.latent_dim})")
    if (class_ids is None) != (dc.n_classes == 0):
        raise ConfigError("class labels are needed exactly when diffusion.n_classes > 0")
    stats = LatentStats.fit(latents)
    z = stats.normalize(torch.from_numpy(latents))
    sigma_data = float(z.double().std(unbiased=False))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(dc.seed)
        den = build_denoiser(dc, latents.shape[1], latents.shape[2], sigma_data)
    opt = torch.optim.AdamW(den.parameters(), lr=dc.lr, weight_decay=dc.weight_decay)
    labels = None if class_ids is None else torch.as_tensor(class_ids, dtype=torch.long)
    model = DiffusionModel(den, stats, cfg, vae_hash)
    total = dc.steps if steps is None else steps
    for step in range(total):
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([dc.seed, step]).generate_state(1)[0]))
        idx = torch.randint(0, len(z), (dc.batch_size,), generator=gen)
        sigma = sample_sigma(dc.batch_size, dc.p_mean, dc.p_std, gen)
        noise = torch.randn(dc.batch_size, *z.shape[1:], generator=gen)
        loss = diffusion_loss(den, z[idx], noise, sigma, None if labels is None else labels[idx])
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite diffusion loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"stage": "diffusion", "step": step, "loss": float(loss.detach())}
        model.history.append(rec)
        if callback is not None:
            callback(step, rec, den)
    return model


# -- generation -------------------------------------------------------------------

@dataclass
class GenerationResult:
    latents: torch.Tensor
    meshes: list[Mesh]
    timings: dict[str, float]


def check_compatible(diff: DiffusionModel, vae_ckpt: Checkpoint, force: bool = False) -> None:
    enc = vae_ckpt.config.get("encoder", {})
    net = diff.denoiser.net
    if (enc.get("n_latents"), enc.get("latent_dim")) != (net.n_latents, net.latent_dim):
        raise ConfigError(f"diffusion latents ({net.n_latents}, {net.latent_dim}) do not match VAE "
                          f"encoder.n_latents x encoder.latent_dim ({enc.get('n_latents')}, "
                          f"{enc.get('latent_dim')})")
    if diff.vae_hash and diff.vae_hash != vae_ckpt.content_hash() and not force:
        raise ConfigError("diffusion model was trained against a different VAE checkpoint; "
                          "pass --force to use it anyway")


@torch.no_grad()
def generate(diff: DiffusionModel, vae, n: int, steps: int | None = None, class_id=None,
             seed: int = 0, grid_r: int = 128, multires: bool = False) -> GenerationResult:
    """Sample latents, decode to triplanes and extract meshes, timing each stage."""
    t0 = time.perf_counter()
    z = diff.sample(n, steps, class_id, seed)
    t1 = time.perf_counter()
    planes = vae.decode_latents(z).planes
    t2 = time.perf_counter()
    fc = vae.cfg.fields
    meshes = []
    for p in planes:
        field_fn = vae.field(p)
        if multires:
            grid = multires_grid_eval(field_fn, grid_r // 2, grid_r, fc.dilation, fc.threshold, fc.chunk)
        else:
            grid = dense_grid_eval(field_fn, grid_r, fc.chunk)
        meshes.append(extract_mesh(grid, fc.threshold))
    t3 = time.perf_counter()
    timings = {"sampling": t1 - t0, "decoding": t3 - t1, "latent_decoding": t2 - t1,
               "fields": t3 - t2, "full": t3 - t0}
    return GenerationResult(z, meshes, timings)


@torch.no_grad()
def denoiser_throughput(n_latents: int, latent_dim: int = 32, width: int = 256, n_layers: int = 8,
                        heads: int = 8, batch: int = 8, repeats: int = 7, seed: int = 0) -> float:
    """Median samples/s of one denoiser evaluation at the given set size."""
    torch.manual_seed(seed)
    den = EDMDenoiser(DenoiserNet(n_latents, latent_dim, width, n_layers, heads))
    x = torch.randn(batch, n_latents, latent_dim)
    den(x, 1.0)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        den(x, 1.0)
        times.append(time.perf_counter() - t)
    return batch / float(np.median(times))
