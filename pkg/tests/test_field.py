"""Tri-plane sampling semantics, latent-modulated synthesis, decoding, and a
small pretraining run against the analytic oracle."""

import numpy as np
import pytest

from fieldedit.autodiff import Tensor, compute_gradients
from fieldedit.field import (FeatureDecoder, LatentCode, PlaneSynthesizer,
                             PretrainConfig, TriPlaneSet, colors_from_latent,
                             decode_point, field_fn_from, pretrain_field,
                             render_view, sample_feature, sample_features)
from fieldedit.rendering import PoseRanges, Upsampler
from fieldedit.scenes import two_blob_scene


def _planes(rng, R=5, C=2, extent=1.0, dtype=np.float64):
    arrs = tuple(Tensor(rng.standard_normal((R, R, C)).astype(dtype))
                 for _ in range(3))
    return TriPlaneSet(arrs, extent=extent)


class TestTriPlaneSampling:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_grid_nodes_sample_exactly(self):
        # align-corners: world position mapping a grid node on all three
        # planes returns the exact sum of stored values
        R, C = 5, 3
        planes = _planes(self.rng, R, C)
        # choose a lattice point: indices (i,j,k) -> world coords
        idx = np.array([1, 3, 2])
        world = idx / (R - 1.0) * 2.0 - 1.0
        out = sample_features(planes, Tensor(world[None, :]))
        # plane axes: (0,1), (0,2), (1,2); u indexes the first listed axis
        expect = (planes.planes[0].data[idx[0], idx[1]]
                  + planes.planes[1].data[idx[0], idx[2]]
                  + planes.planes[2].data[idx[1], idx[2]])
        assert np.allclose(out.data[0], expect, rtol=1e-12, atol=1e-12)

    def test_cell_center_bilinear_hand_value(self):
        # one plane with a known 2x2 corner patch; the midpoint of the cell
        # averages the four corners
        R, C = 4, 1
        zeros = [np.zeros((R, R, C)) for _ in range(3)]
        zeros[0][0, 0, 0], zeros[0][0, 1, 0] = 0.0, 1.0
        zeros[0][1, 0, 0], zeros[0][1, 1, 0] = 2.0, 3.0
        planes = TriPlaneSet(tuple(Tensor(z) for z in zeros), extent=1.0)
        # world point whose (x, y) maps to plane coords (0.5, 0.5), and whose
        # remaining coords hit node 0 on the other planes
        u = 0.5 / (R - 1.0) * 2.0 - 1.0
        world = np.array([[u, u, -1.0]])
        out = sample_features(planes, Tensor(world))
        assert out.data[0, 0] == pytest.approx(1.5, abs=1e-12)

    def test_clamps_outside_extent(self):
        planes = _planes(self.rng)
        inside = sample_features(planes, Tensor(np.array([[1.0, 1.0, 1.0]])))
        beyond = sample_features(planes, Tensor(np.array([[3.0, 5.0, 2.0]])))
        assert np.allclose(inside.data, beyond.data, rtol=0, atol=0)

    def test_linearity_in_planes(self):
        rng = self.rng
        pa, pb = _planes(rng), _planes(rng)
        x = Tensor(rng.uniform(-0.9, 0.9, size=(12, 3)))
        summed = TriPlaneSet(tuple(Tensor(a.data + b.data) for a, b in
                                   zip(pa.planes, pb.planes)), extent=1.0)
        fa = sample_features(pa, x).data
        fb = sample_features(pb, x).data
        fs = sample_features(summed, x).data
        assert np.allclose(fs, fa + fb, rtol=1e-12, atol=1e-12)

    def test_positions_gradient_zero_in_clamp_region(self):
        planes = _planes(self.rng)
        x = Tensor(np.array([[2.0, 2.0, 2.0], [0.1, -0.2, 0.3]]),
                   requires_grad=True)
        loss = sample_features(planes, x).sum()
        g = compute_gradients(loss, {"x": x})["x"]
        assert np.all(g[0] == 0.0)       # fully clamped point
        assert np.any(g[1] != 0.0)       # interior point

    def test_sample_feature_scalar_helper(self):
        planes = _planes(self.rng)
        fs = sample_feature(planes, (0.2, -0.3, 0.5))
        batched = sample_features(planes, Tensor(np.array([[0.2, -0.3, 0.5]])))
        assert np.allclose(fs.feature, batched.data[0], atol=1e-12)

    def test_triplane_validation(self):
        a = Tensor(np.zeros((4, 4, 2)))
        with pytest.raises(ValueError):
            TriPlaneSet((a, a), extent=1.0)
        with pytest.raises(ValueError):
            TriPlaneSet((a, a, Tensor(np.zeros((5, 5, 2)))), extent=1.0)


class TestLatentCode:
    def test_sample_shapes_and_flat_roundtrip(self):
        w = LatentCode.sample(np.random.default_rng(1), n_groups=4, group_dim=16)
        assert w.n_groups == 4 and w.group_dim == 16
        flat = w.flat()
        assert flat.shape == (64,)
        w2 = LatentCode.from_array(w.numpy())
        assert np.array_equal(w2.numpy(), w.numpy())

    def test_from_array_shape_validation(self):
        with pytest.raises(ValueError):
            LatentCode.from_array(np.zeros((3,)))

    def test_detach_stops_gradients(self):
        w = LatentCode.sample(np.random.default_rng(2))
        for g in w.detach().groups:
            assert not g.requires_grad


class TestPlaneSynthesizer:
    def test_deterministic_given_seed(self):
        w = LatentCode.sample(np.random.default_rng(5))
        a = PlaneSynthesizer(np.random.default_rng(9))(w)
        b = PlaneSynthesizer(np.random.default_rng(9))(w)
        for pa, pb in zip(a.planes, b.planes):
            assert np.array_equal(pa.data, pb.data)

    def test_site_group_rotation(self):
        synth = PlaneSynthesizer(np.random.default_rng(0), n_groups=4)
        sites = [(p, layer) for p in range(3) for layer in range(2)]
        groups = [synth.site_group(p, layer) for p, layer in sites]
        assert groups == [(2 * p + layer) % 4 for p, layer in sites]
        assert set(groups) == {0, 1, 2, 3}  # every group modulates some site

    def test_every_latent_group_affects_output(self):
        rng = np.random.default_rng(3)
        synth = PlaneSynthesizer(rng)
        w = LatentCode.sample(np.random.default_rng(4))
        base = synth(w)
        for gi in range(w.n_groups):
            arrs = [np.array(g.data, copy=True) for g in w.groups]
            arrs[gi] += 0.5
            w2 = LatentCode(tuple(Tensor(a) for a in arrs))
            moved = synth(w2)
            diff = sum(np.abs(pa.data - pb.data).max()
                       for pa, pb in zip(base.planes, moved.planes))
            assert diff > 1e-4, f"group {gi} has no effect"

    def test_latent_shape_mismatch_raises(self):
        synth = PlaneSynthesizer(np.random.default_rng(0), n_groups=4, group_dim=16)
        with pytest.raises(ValueError):
            synth(LatentCode.sample(np.random.default_rng(0), n_groups=2,
                                    group_dim=16))

    def test_plane_shape_and_extent(self):
        synth = PlaneSynthesizer(np.random.default_rng(0), resolution=16,
                                 channels=6, extent=1.5)
        out = synth(LatentCode.sample(np.random.default_rng(1)))
        assert out.resolution == 16 and out.channels == 6
        assert out.extent == 1.5


class TestFeatureDecoder:
    def test_output_ranges(self):
        dec = FeatureDecoder(np.random.default_rng(0), in_channels=8)
        f = Tensor(np.random.default_rng(1).normal(size=(50, 8)).astype(np.float32) * 3)
        values, sigma = dec(f)
        assert values.shape == (50, 8) and sigma.shape == (50,)
        rgb = values.data[:, :3]
        assert np.all(rgb > 0) and np.all(rgb < 1)
        assert np.all(sigma.data >= 0)

    def test_extras_are_raw(self):
        dec = FeatureDecoder(np.random.default_rng(0), in_channels=4,
                             out_channels=6)
        f = Tensor(np.random.default_rng(1).normal(size=(20, 4)).astype(np.float32) * 4)
        values, _ = dec(f)
        extras = values.data[:, 3:]
        assert np.any(extras < 0) or np.any(extras > 1)  # unsquashed

    def test_decode_point_helper(self):
        dec = FeatureDecoder(np.random.default_rng(0), in_channels=8)
        pt = decode_point(dec, np.linspace(-1, 1, 8))
        assert pt.color.shape == (3,) and pt.extras.shape == (5,)
        assert pt.sigma >= 0

    def test_rgb_only_decoder(self):
        dec = FeatureDecoder(np.random.default_rng(0), in_channels=4,
                             out_channels=3)
        values, _ = dec(Tensor(np.zeros((5, 4), dtype=np.float32)))
        assert values.shape == (5, 3)
        with pytest.raises(ValueError):
            FeatureDecoder(np.random.default_rng(0), in_channels=4, out_channels=2)


class TestColorsFromLatent:
    def test_anchored_at_source_latent(self):
        sc = two_blob_scene()
        w = LatentCode.sample(np.random.default_rng(0))
        colors = colors_from_latent(w, w, sc, coupling_seed=777, swing=0.45)
        for b in sc.blobs:
            assert np.allclose(colors[b.name], b.color, atol=1e-12)

    def test_moves_within_swing(self):
        sc = two_blob_scene()
        rng = np.random.default_rng(1)
        w_s = LatentCode.sample(rng)
        w = LatentCode.sample(rng)
        colors = colors_from_latent(w, w_s, sc, coupling_seed=777, swing=0.2)
        for b in sc.blobs:
            assert np.all(np.abs(colors[b.name] - b.color) <= 0.2 + 1e-12)
            assert np.all((colors[b.name] >= 0) & (colors[b.name] <= 1))

    def test_deterministic(self):
        sc = two_blob_scene()
        rng = np.random.default_rng(2)
        w_s, w = LatentCode.sample(rng), LatentCode.sample(rng)
        a = colors_from_latent(w, w_s, sc, 777, 0.45)
        b = colors_from_latent(w, w_s, sc, 777, 0.45)
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestPretrainSmoke:
    def test_tiny_pretrain_reduces_eval_error(self):
        sc = two_blob_scene()
        rng = np.random.default_rng(0)
        w_s = LatentCode.sample(rng)
        ranges = PoseRanges(radius=2.7, azimuth_range=(-0.5, 0.5),
                            elevation_range=(-0.3, 0.3), fov_y=0.75)
        cfg = PretrainConfig(steps=120, views=3, eval_views=1, eval_interval=60,
                             oracle_steps=96, coupled_latents=1, feature_hw=8,
                             n_samples=16)
        synth = PlaneSynthesizer(rng, resolution=12)
        bundle, log = pretrain_field(sc, w_s, ranges, cfg, rng, synthesizer=synth)
        steps = [s for s, _ in log]
        errs = [e for _, e in log]
        assert steps == [0, 60, 120]
        assert errs[-1] < 0.5 * errs[0]
        # the bundle comes back frozen
        assert all(not p.requires_grad
                   for m in bundle.modules().values()
                   for p in m.parameters().values())

    def test_render_view_shapes(self):
        rng = np.random.default_rng(0)
        synth = PlaneSynthesizer(rng, resolution=8)
        dec = FeatureDecoder(rng, in_channels=synth.channels)
        up = Upsampler(dec.out_channels)
        w = LatentCode.sample(rng)
        fn = field_fn_from(synth(w), dec)
        from fieldedit.rendering import pose_from_angles
        rgb, out = render_view(fn, up, pose_from_angles(0, 0, 2.7, 0.75),
                               feature_hw=6, n_samples=8, near=1.2, far=4.2)
        assert rgb.shape == (12, 12, 3)
        assert out["values"].shape == (36, 8)
