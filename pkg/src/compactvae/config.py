"""Nested configuration with defaults, file loading and validation.

Precedence is ``overrides > file > defaults``. A config file is TOML with one
table per section, e.g.::

    [encoder]
    n_latents = 64

    [decoder]
    resolution = 128
"""

from __future__ import annotations

import copy
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class GeometryConfig:
    count: int = 1024  # shapes in a generated dataset
    seed: int = 0
    n_vol: int = 4096  # uniform queries per shape and step
    n_near: int = 4096  # near-surface queries per shape and step
    near_sigma: float = 0.05


@dataclass
class EncoderConfig:
    n_points: int = 2048  # N
    n_patches: int = 256  # L
    n_latents: int = 32  # M
    width: int = 256  # C
    latent_dim: int = 32  # D
    n_blocks: int = 4
    heads: int = 8
    patch_layers: int = 3  # self-attention layers on point patches per block
    position_mode: str = "input-dependent"  # or "learnable"
    n_freqs: int = 48


@dataclass
class DecoderConfig:
    resolution: int = 64  # R
    patch_size: int = 8  # f
    channels: int = 32  # C_t
    n_layers: int = 6
    keep_ratio: float = 0.25
    n_merged: int = 8
    latent_layers: int = 2  # self-attention layers in the latent decoder


@dataclass
class FieldConfig:
    hidden: int = 64
    depth: int = 2
    grid_resolution: int = 128
    coarse_resolution: int = 64
    dilation: int = 1
    threshold: float = 0.5
    chunk: int = 65536


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    ae_steps: int = 2000
    vae_steps: int = 1000
    milestones: list = field(default_factory=list)  # steps at which lr is multiplied by gamma
    gamma: float = 0.5
    lambda_unc: float = 0.01
    lambda_kl: float = 0.001
    near_weight: float = 0.1
    seed: int = 0
    log_every: int = 20
    checkpoint_every: int = 500


@dataclass
class DiffusionConfig:
    n_layers: int = 8
    width: int = 256
    heads: int = 8
    n_classes: int = 0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 4000
    sampling_steps: int = 18
    seed: int = 0


@dataclass
class MetricsConfig:
    iou_queries: int = 50_000
    surface_points: int = 10_000
    fscore_tau: float = 0.02
    set_points: int = 2048
    near_sigma: float = 0.05


SECTIONS = {
    "geometry": GeometryConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "fields": FieldConfig,
    "training": TrainConfig,
    "diffusion": DiffusionConfig,
    "metrics": MetricsConfig,
}


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fields: FieldConfig = field(default_factory=FieldConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict, base: "Config | None" = None) -> "Config":
        cfg = copy.deepcopy(base) if base is not None else cls()
        for section, values in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a table")
            target = getattr(cfg, section)
            known = {f.name: f for f in dataclasses.fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(target, key, _coerce(section, key, getattr(target, key), value))
        cfg.validate()
        return cfg

    def replace(self, **overrides: Any) -> "Config":
        """Apply dotted overrides such as ``{"encoder.n_latents": 16}``."""
        nested: dict[str, dict] = {}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            nested.setdefault(section, {})[key] = value
        return Config.from_dict(nested, base=self)

    def validate(self) -> None:
        e, d, g = self.encoder, self.decoder, self.geometry
        if not e.n_latents <= e.n_patches:
            raise ConfigError(f"encoder.n_latents ({e.n_latents}) must be <= encoder.n_patches ({e.n_patches})")
        if not e.n_patches <= e.n_points:
            raise ConfigError(f"encoder.n_patches ({e.n_patches}) must be <= encoder.n_points ({e.n_points})")
        if not e.latent_dim < e.width:
            raise ConfigError(f"encoder.latent_dim ({e.latent_dim}) must be < encoder.width ({e.width})")
        if e.width % e.heads:
            raise ConfigError(f"encoder.width ({e.width}) must be divisible by encoder.heads ({e.heads})")
        if e.position_mode not in ("input-dependent", "learnable"):
            raise ConfigError(f"encoder.position_mode must be 'input-dependent' or 'learnable', got {e.position_mode!r}")
        if d.resolution % d.patch_size:
            raise ConfigError(f"decoder.resolution ({d.resolution}) must be divisible by decoder.patch_size ({d.patch_size})")
        if not 0.0 < d.keep_ratio <= 1.0:
            raise ConfigError(f"decoder.keep_ratio must be in (0, 1], got {d.keep_ratio}")
        if d.n_merged < 1:
            raise ConfigError("decoder.n_merged must be >= 1")
        if self.fields.grid_resolution % self.fields.coarse_resolution:
            raise ConfigError(
                f"fields.grid_resolution ({self.fields.grid_resolution}) must be divisible by "
                f"fields.coarse_resolution ({self.fields.coarse_resolution})")
        if g.near_sigma <= 0:
            raise ConfigError("geometry.near_sigma must be positive")
        t = self.training
        for name in ("lambda_unc", "lambda_kl", "near_weight"):
            if getattr(t, name) < 0:
                raise ConfigError(f"training.{name} must be >= 0")
        df = self.diffusion
        if not 0 < df.sigma_min < df.sigma_max:
            raise ConfigError(f"diffusion.sigma_min ({df.sigma_min}) must be < diffusion.sigma_max ({df.sigma_max})")
        if df.rho <= 0:
            raise ConfigError("diffusion.rho must be positive")
        if df.width % df.heads:
            raise ConfigError(f"diffusion.width ({df.width}) must be divisible by diffusion.heads ({df.heads})")


def _coerce(section: str, key: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return int(as_float)
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}") from None
    if isinstance(current, list):
        if isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else [
                int(v) for v in value.split(",") if v.strip()]
        return list(value)
    return value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                preset: str = "desk", base: Config | None = None) -> Config:
    """Resolve ``overrides > file > base`` where ``base`` defaults to the named preset."""
    if base is None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = copy.deepcopy(base) if base is not None else PRESETS[preset]()
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = Config.from_dict(data, base=cfg)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def desk_config() -> Config:
    return Config()


def paper_config() -> Config:
    """Full-size architecture (training it needs GPUs)."""
    return Config().replace(**{
        "encoder.n_patches": 512, "encoder.n_latents": 64, "encoder.width": 512,
        "decoder.resolution": 128, "decoder.n_layers": 12,
        "training.batch_size": 256, "training.milestones": [],
    })


def overfit_config() -> Config:
    """Small model used to overfit a handful of procedural shapes on a CPU."""
    return Config().replace(**{
        "geometry.count": 8,
        "encoder.n_points": 512, "encoder.n_patches": 64, "encoder.n_latents": 16,
        "encoder.width": 128, "encoder.n_blocks": 2, "encoder.heads": 8,
        "decoder.resolution": 32, "decoder.patch_size": 4, "decoder.n_layers": 4,
        "training.lr": 1e-3, "training.batch_size": 8,
        "training.ae_steps": 1500, "training.vae_steps": 800,
        "training.milestones": [1000, 1300], "training.gamma": 0.3,
        "diffusion.n_layers": 6, "diffusion.width": 256, "diffusion.steps": 3000,
        "diffusion.lr": 3e-4, "diffusion.batch_size": 64,
    })


PRESETS = {"desk": desk_config, "paper": paper_config, "overfit": overfit_config}


def latent_size(n_latents: int, latent_dim: int) -> int:
    """Total number of scalars in one latent set."""
    return n_latents * latent_dim


def compression_ratio(n_latents: int, latent_dim: int, baseline_latents: int,
                      baseline_dim: int | None = None) -> float:
    baseline_dim = latent_dim if baseline_dim is None else baseline_dim
    return latent_size(baseline_latents, baseline_dim) / latent_size(n_latents, latent_dim)
