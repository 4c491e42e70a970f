"""Reconstruction and generation metrics.

Chamfer distance is the L2 (not squared) sum of the two one-sided mean
nearest-neighbour distances. IoU and F-score are reported in percent.
Nearest-neighbour queries use an exact k-d tree.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .fields import OccupancyField, evaluate_logits
from .geometry import Mesh, ProceduralShape, mesh_occupancy, sample_mesh_surface, sample_surface_points

CD_CONVENTION = "L2 sum of one-sided means"


def _points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError(f"point set {name} is empty")
    return a


def occupancy_of(obj, points: np.ndarray) -> np.ndarray:
    """Boolean inside-labels of a shape, mesh, occupancy field or callable at ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if isinstance(obj, ProceduralShape):
        return obj.contains(points)
    if isinstance(obj, Mesh):
        if obj.is_empty:
            return np.zeros(len(points), dtype=bool)
        return mesh_occupancy(obj, points, check_closed=False).astype(bool)
    if isinstance(obj, OccupancyField):
        return evaluate_logits(obj, points.astype(np.float32)) >= 0.0
    if callable(obj):
        out = obj(points)
        if torch.is_tensor(out):
            out = out.detach().numpy()
        return np.asarray(out).astype(bool)
    raise TypeError(f"cannot evaluate occupancy of {type(obj).__name__}")


def iou_from_labels(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        warnings.warn("IoU of two empty shapes is defined as 100%", RuntimeWarning, stacklevel=2)
        return 100.0
    return 100.0 * np.count_nonzero(a & b) / union


def iou_volumetric(pred, reference, n_queries: int = 50_000, seed: int = 0) -> float:
    """IoU (%) over ``n_queries`` uniform points of [-1, 1]^3."""
    pts = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n_queries, 3))
    return iou_from_labels(occupancy_of(pred, pts), occupancy_of(reference, pts))


def _surface_of(obj, n: int, rng) -> np.ndarray:
    if isinstance(obj, ProceduralShape):
        return sample_surface_points(obj, n, rng)
    if isinstance(obj, Mesh):
        return sample_mesh_surface(obj, n, rng)
    raise TypeError("near-surface IoU needs a reference with surface sampling")


def iou_near_surface(pred, reference, n_queries: int = 50_000, near_sigma: float = 0.05,
                     seed: int = 0) -> float:
    """IoU (%) over reference surface samples jittered by N(0, near_sigma^2), clamped to the cube."""
    rng = np.random.default_rng(seed)
    pts = _surface_of(reference, n_queries, rng)
    pts = np.clip(pts + near_sigma * rng.standard_normal(pts.shape), -1.0, 1.0)
    return iou_from_labels(occupancy_of(pred, pts), occupancy_of(reference, pts))


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a`` the distance to its nearest point in ``b``."""
    return cKDTree(b).query(a, k=1)[0]


def chamfer_distance(a, b) -> float:
    a, b = _points(a, "A"), _points(b, "B")
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def f_score(a, b, tau: float = 0.02) -> float:
    """F1 (%) of precision (A near B) and recall (B near A) at threshold ``tau``."""
    a, b = _points(a, "A"), _points(b, "B")
    precision = np.mean(nearest_distances(a, b) <= tau)
    recall = np.mean(nearest_distances(b, a) <= tau)
    if precision + recall == 0:
        return 0.0
    return float(100.0 * 2 * precision * recall / (precision + recall))


def surface_points(obj, n: int, seed: int = 0) -> np.ndarray:
    if isinstance(obj, np.ndarray):
        return obj
    return _surface_of(obj, n, np.random.default_rng(seed))


def cd_matrix(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([[chamfer_distance(g, r) for r in ref] for g in gen])


def set_metrics_from_matrices(d_gr: np.ndarray, d_gg: np.ndarray | None = None,
                              d_rr: np.ndarray | None = None) -> dict[str, float]:
    """MMD, COV (%) and 1-NNA (%) from CD matrices.

    ``d_gr[i, j]`` is the distance from generated shape i to reference shape j.
    1-NNA needs the within-set matrices; in leave-one-out classification a tie
    between a same-set and a cross-set neighbour resolves to the cross-set one.
    """
    d_gr = np.asarray(d_gr, dtype=np.float64)
    n_g, n_r = d_gr.shape
    out = {"MMD": float(d_gr.min(axis=0).mean()),
           "COV": float(100.0 * len(np.unique(d_gr.argmin(axis=1))) / n_r)}
    if d_gg is None or d_rr is None:
        return out
    if n_g != n_r:
        raise ValueError(f"1-NNA needs equally sized sets, got {n_g} and {n_r}")
    d_gg = np.array(d_gg, dtype=np.float64)
    d_rr = np.array(d_rr, dtype=np.float64)
    np.fill_diagonal(d_gg, np.inf)
    np.fill_diagonal(d_rr, np.inf)
    # a sample is classified correctly when its nearest neighbour is strictly from its own set
    correct_g = d_gg.min(axis=1) < d_gr.min(axis=1)
    correct_r = d_rr.min(axis=1) < d_gr.min(axis=0)
    out["1-NNA"] = float(100.0 * (correct_g.sum() + correct_r.sum()) / (n_g + n_r))
    return out


def set_metrics(gen: Sequence, ref: Sequence, n_points: int = 2048, seed: int = 0,
                with_nna: bool = True) -> dict[str, float]:
    """CD-based MMD / COV / 1-NNA between two shape sets (shapes, meshes or point arrays)."""
    g = [surface_points(s, n_points, seed + i) for i, s in enumerate(gen)]
    r = [surface_points(s, n_points, seed + 100_003 + i) for i, s in enumerate(ref)]
    if with_nna and len(g) != len(r):
        raise ValueError(f"1-NNA needs equally sized sets, got {len(g)} and {len(r)}")
    d_gr = cd_matrix(g, r)
    if not with_nna:
        return set_metrics_from_matrices(d_gr)
    return set_metrics_from_matrices(d_gr, cd_matrix(g, g), cd_matrix(r, r))


@dataclass
class MetricReport:
    name: str
    values: list[float] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    ids: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    def add(self, value: float, sample_id=None) -> None:
        self.values.append(float(value))
        self.ids.append(sample_id if sample_id is not None else len(self.ids))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = self.mean
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["name"], list(d["values"]), dict(d.get("params", {})), list(d.get("ids", [])))


def reconstruction_reports(preds: Sequence, refs: Sequence[ProceduralShape], pred_surfaces: Sequence,
                           cfg, seed: int = 0) -> dict[str, MetricReport]:
    """IoU, near-surface IoU, CD and F1 per sample."""
    m = cfg.metrics
    reps = {
        "iou": MetricReport("iou", params={"n_queries": m.iou_queries, "seed": seed}),
        "iou_near": MetricReport("iou_near", params={"n_queries": m.iou_queries,
                                                     "near_sigma": m.near_sigma, "seed": seed}),
        "cd": MetricReport("cd", params={"n_points": m.surface_points, "convention": CD_CONVENTION}),
        "f1": MetricReport("f1", params={"n_points": m.surface_points, "tau": m.fscore_tau}),
    }
    for i, (p, r, surf) in enumerate(zip(preds, refs, pred_surfaces)):
        reps["iou"].add(iou_volumetric(p, r, m.iou_queries, seed), i)
        reps["iou_near"].add(iou_near_surface(p, r, m.iou_queries, m.near_sigma, seed), i)
        ref_pts = sample_surface_points(r, m.surface_points, seed)
        if len(surf):
            reps["cd"].add(chamfer_distance(surf, ref_pts), i)
            reps["f1"].add(f_score(surf, ref_pts, m.fscore_tau), i)
        else:
            reps["cd"].add(float("inf"), i)
            reps["f1"].add(0.0, i)
    return reps


def format_table(rows: dict[str, dict[str, float]], columns: Sequence[str]) -> str:
    """Aligned text table: one row per method, one column per metric."""
    head = ["method", *columns]
    body = [[name, *[f"{vals.get(c, float('nan')):.3f}" for c in columns]] for name, vals in rows.items()]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)

