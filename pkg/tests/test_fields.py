import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compactvae.fields import (
    OccupancyField,
    OccupancyMLP,
    dense_grid_eval,
    evaluate_logits,
    extract_mesh,
    lattice,
    logit,
    multires_grid_eval,
    sample_planes,
    triplane_features,
    triplane_sample,
    uncertainty_at_query,
)
from compactvae.geometry import ProceduralShape, mesh_occupancy

import oracles


def sphere_field(radius=0.5, sharp=20.0):
    return lambda p: sharp * (radius - torch.linalg.norm(p.double(), dim=-1))


class TestSampling:
    def test_corners_hit_texel_centres(self):
        plane = torch.arange(16.0).view(4, 4, 1)
        uv = torch.tensor([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
        assert triplane_sample(plane, uv)[:, 0].tolist() == [0.0, 3.0, 12.0, 15.0]

    def test_clamped_outside(self):
        plane = torch.randn(5, 5, 2)
        inside = triplane_sample(plane, torch.tensor([[1.0, -1.0]]))
        outside = triplane_sample(plane, torch.tensor([[3.0, -7.0]]))
        assert torch.equal(inside, outside)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        planes = rng.normal(size=(3, 4, 6, 6))
        q = rng.uniform(-1.1, 1.1, size=(50, 3))
        got = triplane_features(torch.from_numpy(planes)[None], torch.from_numpy(q)[None])[0].numpy()
        ref = np.stack([oracles.triplane_feature(planes, p) for p in q])
        assert np.allclose(got, ref, atol=1e-12)

    def test_plane_axes(self):
        """xy varies with (x, y), yz with (y, z), xz with (x, z)."""
        r = 9
        ramp = torch.linspace(-1, 1, r, dtype=torch.float64)
        planes = torch.zeros(1, 3, 2, r, r, dtype=torch.float64)
        for p in range(3):
            planes[0, p, 0] = ramp[None, :].expand(r, r)  # column coordinate u
            planes[0, p, 1] = ramp[:, None].expand(r, r)  # row coordinate v
        q = torch.tensor([[[0.25, -0.5, 0.75]]], dtype=torch.float64)
        s = sample_planes(planes, q)[0, :, 0]
        assert torch.allclose(s[0], torch.tensor([0.25, -0.5], dtype=torch.float64))
        assert torch.allclose(s[1], torch.tensor([-0.5, 0.75], dtype=torch.float64))
        assert torch.allclose(s[2], torch.tensor([0.25, 0.75], dtype=torch.float64))


class TestUncertainty:
    def test_zero_logits(self):
        u = uncertainty_at_query(torch.zeros(3, 4, 4), torch.rand(10, 3) * 2 - 1)
        assert torch.all(u == 0.125)

    def test_batched_matches_single(self):
        logits = torch.randn(2, 3, 4, 4)
        q = torch.rand(2, 7, 3) * 2 - 1
        batched = uncertainty_at_query(logits, q)
        assert torch.allclose(batched[1], uncertainty_at_query(logits[1], q[1]))

    @settings(max_examples=40, deadline=None)
    @given(g=st.integers(2, 6), seed=st.integers(0, 10_000))
    def test_property_oracle(self, g, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=3.0, size=(3, g, g))
        q = rng.uniform(-1.0, 1.0, size=(5, 3))
        got = uncertainty_at_query(torch.from_numpy(logits), torch.from_numpy(q)).numpy()
        ref = [oracles.uncertainty(logits, p) for p in q]
        assert np.allclose(got, ref, atol=1e-12)
        assert np.all((got > 0) & (got < 1))


class TestField:
    def test_empty_query(self):
        f = OccupancyField(torch.randn(3, 4, 8, 8), OccupancyMLP(4, 16))
        assert f(torch.zeros(0, 3)).shape == (0,)

    def test_logits_shape(self):
        f = OccupancyField(torch.randn(3, 4, 8, 8), OccupancyMLP(4, 16))
        assert f(torch.rand(11, 3)).shape == (11,)

    def test_logit(self):
        assert logit(0.5) == 0.0
        assert logit(0.75) == pytest.approx(math.log(3))


class TestGrids:
    def test_lattice_order(self):
        pts = lattice(3)
        assert pts.shape == (27, 3)
        assert pts[1].tolist() == [-1.0, -1.0, 0.0]
        assert pts[9].tolist() == [0.0, -1.0, -1.0]

    def test_chunk_invariance(self):
        f = OccupancyField(torch.randn(3, 4, 8, 8), OccupancyMLP(4, 16))
        pts = lattice(12)
        a = evaluate_logits(f, pts, chunk=64)
        b = evaluate_logits(f, pts, chunk=1000)
        c = evaluate_logits(f, pts, chunk=10 ** 6)
        assert np.array_equal(a, b) and np.array_equal(a, c)

    def test_subset_invariance(self):
        f = OccupancyField(torch.randn(3, 4, 8, 8), OccupancyMLP(4, 16))
        pts = lattice(10)
        full = evaluate_logits(f, pts)
        idx = np.random.default_rng(0).choice(len(pts), 137, replace=False)
        assert np.array_equal(evaluate_logits(f, pts[idx]), full[idx])

    def test_multires_matches_dense_where_evaluated(self):
        f = OccupancyField(torch.randn(3, 4, 8, 8), OccupancyMLP(4, 16))
        dense = dense_grid_eval(f, 16)
        mr = multires_grid_eval(f, 8, 16, threshold=0.5)
        m = mr.evaluated_mask
        assert np.array_equal(mr.values[m], dense.values[m])
        assert np.all(mr.values[~m] == 0)

    def test_multires_skips_empty_space(self):
        mr = multires_grid_eval(sphere_field(0.4), 16, 32)
        assert 0 < mr.evaluated_mask.mean() < 0.5
        dense = dense_grid_eval(sphere_field(0.4), 32)
        assert np.array_equal(mr.values > 0.5, dense.values > 0.5)

    def test_multires_divisibility(self):
        with pytest.raises(ValueError):
            multires_grid_eval(sphere_field(), 6, 16)

    def test_multires_evaluation_count(self):
        mr = multires_grid_eval(sphere_field(0.4), 8, 16)
        assert mr.evaluations == 8 ** 3 + int(mr.evaluated_mask.sum())


class TestMesh:
    def test_sphere_mesh(self):
        grid = dense_grid_eval(sphere_field(0.5), 48)
        mesh = extract_mesh(grid)
        assert mesh.signed_volume() == pytest.approx(4 / 3 * math.pi * 0.125, rel=0.03)
        counts = mesh.edge_face_counts()
        assert set(counts.values()) == {2}
        pts = np.random.default_rng(0).uniform(-1, 1, size=(5000, 3))
        agree = mesh_occupancy(mesh, pts) == ProceduralShape.sphere(0.5).contains(pts)
        assert agree.mean() > 0.99

    def test_inverted_field_still_outward(self):
        grid = dense_grid_eval(lambda p: -sphere_field(0.5)(p), 24)
        assert extract_mesh(grid).signed_volume() > 0

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_constant_grid_empty(self, value):
        assert extract_mesh(np.full((8, 8, 8), value)).is_empty
