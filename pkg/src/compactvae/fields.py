"""Occupancy decoding from triplanes, grid evaluation and isosurfacing.

Sampling uses the texel-centre convention: a coordinate of -1 lands on the
centre of texel 0 and +1 on the centre of texel R-1; coordinates outside
[-1, 1] are clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Mesh

# (u, v) coordinate pair used by each plane, in storage order
PLANE_AXES = ((0, 1), (1, 2), (0, 2))

# grid evaluation pads every chunk to this many rows so that each query's
# result does not depend on its neighbours in the batch (bitwise)
_ROW_MULTIPLE = 64


def triplane_sample(plane, uv) -> torch.Tensor:
    """Bilinear lookup of one plane.

    ``plane`` is ``R x R x C_t`` (row, col, channel); ``uv`` is ``Q x 2`` with
    ``u`` along columns and ``v`` along rows. Returns ``Q x C_t``.
    """
    plane = torch.as_tensor(plane)
    uv = torch.as_tensor(uv, dtype=plane.dtype).clamp(-1.0, 1.0)
    grid = uv.view(1, -1, 1, 2)
    out = F.grid_sample(plane.permute(2, 0, 1)[None], grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out[0, :, :, 0].t()


def sample_planes(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Per-plane features at ``points``.

    planes: (B, 3, C, H, W); points: (B, Q, 3). Returns (B, 3, Q, C).
    """
    b, _, c, h, w = planes.shape
    q = points.shape[1]
    pts = points.clamp(-1.0, 1.0)
    coords = torch.stack([pts[..., list(ax)] for ax in PLANE_AXES], dim=1)  # B, 3, Q, 2
    out = F.grid_sample(planes.reshape(b * 3, c, h, w), coords.reshape(b * 3, q, 1, 2),
                        mode="bilinear", padding_mode="border", align_corners=True)
    return out.view(b, 3, c, q).transpose(2, 3)


def triplane_features(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sum of the three plane samples: (B, Q, C_t)."""
    return sample_planes(planes, points).sum(dim=1)


class OccupancyMLP(nn.Module):
    """Shallow MLP: summed triplane feature -> one occupancy logit."""

    def __init__(self, channels: int, hidden: int = 64, depth: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        d = channels
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.GELU()]
            d = hidden
        layers.append(nn.Linear(d, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features).squeeze(-1)


def occupancy_logits(planes: torch.Tensor, mlp: OccupancyMLP, points: torch.Tensor) -> torch.Tensor:
    """(B, 3, C, R, R) planes and (B, Q, 3) points -> (B, Q) logits."""
    return mlp(triplane_features(planes, points))


@dataclass
class OccupancyField:
    """One shape's triplane (3, C_t, R, R) with the shared MLP."""

    planes: torch.Tensor
    mlp: OccupancyMLP

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        pts = torch.as_tensor(points, dtype=self.planes.dtype)
        if pts.shape[0] == 0:
            return pts.new_zeros(0)
        return occupancy_logits(self.planes[None], self.mlp, pts[None])[0]


def query_occupancy(field: OccupancyField, queries) -> torch.Tensor:
    return field(queries)


def uncertainty_at_query(logit_planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Product over planes of bilinearly sampled sigmoid(logits).

    logit_planes: (3, g, g) or (B, 3, g, g); points: (Q, 3) or (B, Q, 3).
    """
    single = logit_planes.dim() == 3
    if single:
        logit_planes, points = logit_planes[None], points[None]
    probs = torch.sigmoid(logit_planes)
    pts = points.to(probs.dtype).clamp(-1.0, 1.0)
    u = torch.stack([_lerp_sample(probs[:, p], pts[..., a], pts[..., b])
                     for p, (a, b) in enumerate(PLANE_AXES)], dim=1).prod(dim=1)
    return u[0] if single else u


def _lerp_sample(grid: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (B, g, g) grids at (B, Q) coordinates, same convention as
    :func:`triplane_sample`, written as nested lerps so constant grids come back exactly."""
    b, g, _ = grid.shape
    x = (u + 1.0) * (0.5 * (g - 1))
    y = (v + 1.0) * (0.5 * (g - 1))
    x0 = x.floor().clamp(0, g - 1)
    y0 = y.floor().clamp(0, g - 1)
    ax, ay = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=g - 1), (y0 + 1).clamp(max=g - 1)
    flat = grid.reshape(b, g * g)

    def at(yi, xi):
        return torch.gather(flat, 1, yi * g + xi)

    top = at(y0, x0) + ax * (at(y0, x1) - at(y0, x0))
    bottom = at(y1, x0) + ax * (at(y1, x1) - at(y1, x0))
    return top + ay * (bottom - top)


# -- grids ------------------------------------------------------------------------

@dataclass
class OccupancyGrid:
    """Probabilities on the lattice ``linspace(-1, 1, r)^3`` indexed [x, y, z]."""

    values: np.ndarray
    evaluated_mask: np.ndarray
    coarse_evaluations: int = 0

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def evaluations(self) -> int:
        return int(self.evaluated_mask.sum()) + self.coarse_evaluations


def lattice(r: int) -> np.ndarray:
    """All r^3 lattice points of [-1, 1]^3 in [x, y, z] C order, float32."""
    axis = np.linspace(-1.0, 1.0, r, dtype=np.float64)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return pts.reshape(-1, 3).astype(np.float32)


@torch.no_grad()
def evaluate_logits(field: Callable, points: np.ndarray, chunk: int = 65536,
                    dtype: torch.dtype = torch.float32) -> np.ndarray:
    """Chunked logits with fixed-multiple padding; chunking never changes values."""
    chunk = max(_ROW_MULTIPLE, chunk - chunk % _ROW_MULTIPLE)
    out = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), chunk):
        block = torch.as_tensor(points[start:start + chunk], dtype=dtype)
        n = len(block)
        pad = (-n) % _ROW_MULTIPLE
        if pad:
            block = torch.cat([block, block.new_zeros(pad, 3)])
        out[start:start + n] = field(block)[:n].double().numpy()
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def dense_grid_eval(field: Callable, r: int = 128, chunk: int = 65536) -> OccupancyGrid:
    if r < 2:
        raise ValueError("grid resolution must be >= 2")
    probs = _sigmoid(evaluate_logits(field, lattice(r), chunk)).reshape(r, r, r)
    return OccupancyGrid(probs, np.ones((r, r, r), dtype=bool))


def multires_grid_eval(field: Callable, coarse_r: int = 64, fine_r: int = 128,
                       dilation: int = 1, threshold: float = 0.5,
                       chunk: int = 65536) -> OccupancyGrid:
    """Coarse pass, then fine evaluation only inside (dilated) occupied voxels.

    A coarse voxel is occupied when any of its eight corners reaches
    ``threshold``. Fine lattice points are evaluated when the coarse voxel
    containing them is occupied after dilation; everything else stays 0 and
    is flagged unevaluated.
    """
    if fine_r % coarse_r:
        raise ValueError(f"fine resolution {fine_r} is not divisible by coarse resolution {coarse_r}")
    if coarse_r < 2:
        raise ValueError("coarse resolution must be >= 2")
    coarse = _sigmoid(evaluate_logits(field, lattice(coarse_r), chunk)).reshape((coarse_r,) * 3)
    occ = torch.from_numpy(coarse >= threshold).float()[None, None]
    # a voxel is occupied if any of its 8 corners is
    voxels = F.max_pool3d(occ, kernel_size=2, stride=1)
    if dilation > 0:
        voxels = F.max_pool3d(voxels, kernel_size=2 * dilation + 1, stride=1, padding=dilation)
    voxels = voxels[0, 0].numpy() > 0  # (coarse_r - 1)^3

    t = (np.linspace(-1.0, 1.0, fine_r) + 1.0) / 2.0 * (coarse_r - 1)
    cell = np.clip(np.floor(t).astype(np.int64), 0, coarse_r - 2)
    mask = voxels[np.ix_(cell, cell, cell)]
    values = np.zeros((fine_r,) * 3, dtype=np.float64)
    flat = np.flatnonzero(mask)
    if len(flat):
        pts = lattice(fine_r)[flat]
        values.reshape(-1)[flat] = _sigmoid(evaluate_logits(field, pts, chunk))
    return OccupancyGrid(values, mask, coarse_evaluations=coarse_r ** 3)


def extract_mesh(grid: OccupancyGrid | np.ndarray, threshold: float = 0.5) -> Mesh:
    """Marching cubes at ``threshold``; vertices mapped back to [-1, 1]^3.

    The grid is not padded, so a grid that is entirely above the threshold has
    no crossing and yields an empty mesh, as does an all-below grid. Faces are
    oriented with outward normals.
    """
    from skimage.measure import marching_cubes

    values = grid.values if isinstance(grid, OccupancyGrid) else np.asarray(grid)
    r = values.shape[0]
    if not values.min() < threshold < values.max():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    step = 2.0 / (r - 1)
    verts, faces, _, _ = marching_cubes(values.astype(np.float64), level=threshold,
                                        spacing=(step, step, step))
    mesh = Mesh(verts - 1.0, faces.astype(np.int64))
    if mesh.signed_volume() < 0:
        mesh = Mesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))
