"""Losses and the two-stage optimization loops.

Stage ``ae`` trains encoder, triplane decoder and occupancy MLP on
reconstruction plus uncertainty supervision. Stage ``vae`` freezes those and
trains only the KL block and latent decoder.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import (Checkpoint, load_state, optimizer_from_arrays, optimizer_to_arrays,
                         rng_arrays, state_to_arrays)
from .config import Config, TrainConfig
from .decoder import logits_to_grid
from .errors import ConfigError, NumericError
from .fields import uncertainty_at_query
from .geometry import ProceduralShape, make_dataset, sample_queries, sample_surface_points
from .layers import layer_norm_plain
from .model import AE_MODULES, VAE_MODULES, ShapeVAE

STAGES = ("ae", "vae")


@dataclass
class LossWeights:
    lambda_unc: float = 0.01
    lambda_kl: float = 0.001
    near_weight: float = 0.1

    def __post_init__(self):
        for name in ("lambda_unc", "lambda_kl", "near_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, t: TrainConfig) -> "LossWeights":
        return cls(t.lambda_unc, t.lambda_kl, t.near_weight)


# -- losses -----------------------------------------------------------------------

def per_query_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE clipped to [0, 1]."""
    bce = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    return bce.clamp(0.0, 1.0)


def recon_loss(logits: torch.Tensor, labels: torch.Tensor, near: torch.Tensor,
               near_weight: float = 0.1) -> torch.Tensor:
    """Mean BCE over volume queries plus ``near_weight`` times the near-surface mean."""
    bce = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    near = near.bool()
    vol = bce[~near].mean() if (~near).any() else bce.new_zeros(())
    nr = bce[near].mean() if near.any() else bce.new_zeros(())
    return vol + near_weight * nr


def uncertainty_loss(u_values: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(u_values, targets.detach())


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return (0.5 * (mu ** 2 + torch.exp(logvar) - logvar - 1.0)).mean()


def feature_matching_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between per-vector standardized features (no affine)."""
    return F.mse_loss(layer_norm_plain(pred), layer_norm_plain(target))


# -- batches ----------------------------------------------------------------------

@dataclass
class Batch:
    cloud: torch.Tensor  # B, N, 3
    points: torch.Tensor  # B, Q, 3
    labels: torch.Tensor  # B, Q
    near: torch.Tensor  # B, Q bool
    indices: np.ndarray  # dataset index of each item
    anchor_seed: int = 0
    noise_seed: int = 0

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {"cloud": self.cloud.numpy(), "points": self.points.numpy(),
                "labels": self.labels.numpy(), "near": self.near.numpy(), "indices": self.indices}


def dataset_shapes(cfg: Config) -> list[ProceduralShape]:
    g = cfg.geometry
    return [ProceduralShape.from_dict(e) for e in make_dataset(g.count, g.seed)]


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


def make_batch(shapes: Sequence[ProceduralShape], cfg: Config, step: int, seed: int | None = None,
               dtype: torch.dtype = torch.float32) -> Batch:
    """Batch for ``step``; a pure function of (shapes, config, seed, step)."""
    seed = cfg.training.seed if seed is None else seed
    rng = step_rng(seed, step)
    n, b = len(shapes), cfg.training.batch_size
    order = np.concatenate([rng.permutation(n) for _ in range(-(-b // n))])[:b]
    g = cfg.geometry
    clouds, pts, labels, near = [], [], [], []
    for i in order:
        clouds.append(sample_surface_points(shapes[i], cfg.encoder.n_points, rng))
        q = sample_queries(shapes[i], g.n_vol, g.n_near, g.near_sigma, rng)
        pts.append(q.points)
        labels.append(q.labels)
        near.append(q.near)
    seeds = rng.integers(0, 2 ** 31, size=2)
    return Batch(torch.as_tensor(np.stack(clouds), dtype=dtype),
                 torch.as_tensor(np.stack(pts), dtype=dtype),
                 torch.as_tensor(np.stack(labels), dtype=dtype),
                 torch.as_tensor(np.stack(near)), order, int(seeds[0]), int(seeds[1]))


# -- objectives -------------------------------------------------------------------

def _noise_like(mu: torch.Tensor, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(mu.shape, generator=gen, dtype=mu.dtype)


def _ae_terms(model: ShapeVAE, feats: torch.Tensor, batch: Batch, w: LossWeights) -> dict:
    out = model.decode(feats)
    final_logits = model.logits(out.planes, batch.points)
    base_logits = model.logits(out.base_planes, batch.points)
    cfg = model.cfg.decoder
    u = uncertainty_at_query(logits_to_grid(out.logits, cfg.resolution, cfg.patch_size), batch.points)
    targets = per_query_bce(base_logits, batch.labels).detach()
    terms = {
        "recon_final": recon_loss(final_logits, batch.labels, batch.near, w.near_weight),
        "recon_base": recon_loss(base_logits, batch.labels, batch.near, w.near_weight),
        "unc": uncertainty_loss(u, targets),
    }
    terms["ae"] = terms["recon_final"] + terms["recon_base"] + w.lambda_unc * terms["unc"]
    with torch.no_grad():
        vol = ~batch.near
        pred = final_logits[vol] >= 0
        lab = batch.labels[vol] > 0.5
        union = (pred | lab).sum()
        terms["iou"] = (pred & lab).sum() / union if union > 0 else torch.ones(())
    return terms


def stage1_loss(model: ShapeVAE, batch: Batch, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """L_ae on a batch: final + base reconstruction and uncertainty regression."""
    feats = model.encode_features(batch.cloud, seed=batch.anchor_seed)
    terms = _ae_terms(model, feats, batch, weights)
    return terms["ae"], terms


def stage2_loss(model: ShapeVAE, batch: Batch, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """L_vae: feature matching + L_ae through the frozen decoder + KL."""
    with torch.no_grad():
        target = model.encode_features(batch.cloud, seed=batch.anchor_seed)
    mu, logvar = model.posterior(target)
    z = mu + torch.exp(0.5 * logvar) * _noise_like(mu, batch.noise_seed)
    pred = model.latent_decoder(z)
    terms = _ae_terms(model, pred, batch, weights)
    terms["fm"] = feature_matching_loss(pred, target)
    terms["kl"] = kl_loss(mu, logvar)
    terms["vae"] = terms["fm"] + terms["ae"] + weights.lambda_kl * terms["kl"]
    return terms["vae"], terms


# -- loop -------------------------------------------------------------------------

def learning_rate(base: float, step: int, milestones: Sequence[int], gamma: float) -> float:
    return base * gamma ** sum(1 for m in milestones if step >= m)


def trainable_modules(stage: str) -> tuple[str, ...]:
    if stage not in STAGES:
        raise ConfigError(f"unknown training stage {stage!r}")
    return AE_MODULES if stage == "ae" else VAE_MODULES


def set_stage(model: ShapeVAE, stage: str) -> tuple[list[str], list[torch.nn.Parameter]]:
    """Enable gradients for the stage's modules only; returns (names, params) to optimize."""
    active = trainable_modules(stage)
    for p in model.parameters():
        p.requires_grad_(False)
    named = model.named_parameters_of(active)
    for _, p in named:
        p.requires_grad_(True)
    return [n for n, _ in named], [p for _, p in named]


def make_optimizer(params, t: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=t.lr, weight_decay=t.weight_decay)


def check_frozen(model: ShapeVAE, stage: str) -> None:
    active = set(trainable_modules(stage))
    for name in AE_MODULES + VAE_MODULES:
        if name in active:
            continue
        for pname, p in getattr(model, name).named_parameters():
            if p.grad is not None and bool(p.grad.ne(0).any()):
                raise RuntimeError(f"frozen parameter {name}.{pname} received a gradient")


@dataclass
class TrainResult:
    model: ShapeVAE
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def make_checkpoint(model: ShapeVAE, stage: str, step: int, opt=None, names=None,
                    parent: str | None = None) -> Checkpoint:
    arrays = state_to_arrays(model)
    if opt is not None:
        arrays.update(optimizer_to_arrays(opt, names))
    arrays.update(rng_arrays())
    meta = {"kind": "vae", "stage": stage, "step": step, "config": model.cfg.to_dict(),
            "parent": parent}
    return Checkpoint(arrays, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> ShapeVAE:
    cfg = Config.from_dict(ckpt.config)
    model = ShapeVAE(cfg)
    load_state(model, ckpt.subset("model."))
    return model


def _dump_batch(out_dir: Path | None, batch: Batch, step: int) -> str:
    base = Path(out_dir) if out_dir is not None else Path.cwd()
    base.mkdir(parents=True, exist_ok=True)
    path = base / f"nan_batch_step{step}.npz"
    np.savez(path, **batch.to_numpy())
    return str(path)


def train(cfg: Config, stage: str, shapes: Sequence[ProceduralShape] | None = None,
          init: Checkpoint | None = None, steps: int | None = None,
          out_dir: str | Path | None = None, log_path: str | Path | None = None,
          callback: Callable[[int, dict, ShapeVAE], None] | None = None,
          model_seed: int | None = None) -> TrainResult:
    """Run ``stage`` for ``steps`` optimizer steps and return the final checkpoint.

    ``init`` is either a checkpoint of the same stage (resume: weights,
    optimizer moments and step counter are restored) or, for ``vae``, the
    stage-1 checkpoint to start from. Batches depend only on (seed, step), so
    a resumed run follows the uninterrupted trajectory.
    """
    trainable_modules(stage)
    t = cfg.training
    shapes = dataset_shapes(cfg) if shapes is None else list(shapes)
    if not shapes:
        raise ConfigError("training needs at least one shape")
    resume = init is not None and init.stage == stage
    if stage == "vae" and init is None:
        raise ConfigError("stage 'vae' needs a stage-1 checkpoint; run `train ae` first")
    if init is not None and init.stage not in STAGES:
        raise ConfigError(f"checkpoint stage {init.stage!r} cannot initialize training")

    if init is None:
        model = ShapeVAE.from_seed(cfg, t.seed if model_seed is None else model_seed)
    else:
        model = ShapeVAE(cfg)
        load_state(model, init.subset("model."))
    names, params = set_stage(model, stage)
    opt = make_optimizer(params, t)
    start = 0
    parent = None
    if resume:
        optimizer_from_arrays(opt, names, init.arrays)
        start = int(init.meta.get("step", 0))
        parent = init.meta.get("parent")
    elif init is not None:
        parent = init.content_hash()
    total = (t.ae_steps if stage == "ae" else t.vae_steps) if steps is None else steps
    weights = LossWeights.from_config(t)
    objective = stage1_loss if stage == "ae" else stage2_loss
    out_dir = Path(out_dir) if out_dir is not None else None
    log = open(log_path, "a") if log_path is not None else None
    history: list[dict] = []
    try:
        for step in range(start, total):
            batch = make_batch(shapes, cfg, step)
            lr = learning_rate(t.lr, step, t.milestones, t.gamma)
            for g in opt.param_groups:
                g["lr"] = lr
            t0 = time.perf_counter()
            opt.zero_grad(set_to_none=True)
            loss, terms = objective(model, batch, weights)
            if not torch.isfinite(loss):
                path = _dump_batch(out_dir, batch, step)
                raise NumericError(f"non-finite loss at step {step}; batch dumped to {path}")
            loss.backward()
            if stage == "vae":
                check_frozen(model, stage)
            opt.step()
            rec = {"stage": stage, "step": step, "lr": lr, "time": time.perf_counter() - t0}
            rec.update({k: float(v.detach()) for k, v in terms.items()})
            rec["loss"] = float(loss.detach())
            history.append(rec)
            if log is not None and (step % t.log_every == 0 or step == total - 1):
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            if callback is not None:
                callback(step, rec, model)
            if (out_dir is not None and t.checkpoint_every > 0 and (step + 1) % t.checkpoint_every == 0
                    and step + 1 < total):
                make_checkpoint(model, stage, step + 1, opt, names, parent).save(
                    out_dir / f"{stage}_step{step + 1}.ckpt")
    finally:
        if log is not None:
            log.close()
    if resume and total <= start:
        return TrainResult(model, init, history)
    ckpt = make_checkpoint(model, stage, max(total, start), opt, names, parent)
    if out_dir is not None:
        ckpt.save(out_dir / f"{stage}.ckpt")
    return TrainResult(model, ckpt, history)


def moving_average(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
