import math

import numpy as np
import pytest
from conftest import FD_STEPS, sample_smooth_scene, wild_scene

from lidarsplat.geometry import CameraIntrinsics, Pose
from lidarsplat.splatmap import (
    Gaussian,
    GaussianMap,
    ProjectedGaussian,
    alpha_at,
    project_gaussian,
    render,
    render_backward,
    render_brute,
)


def standard_intrinsics():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=12.0, width=32, height=24)


class TestProjectGaussian:
    def test_on_axis(self):
        g = Gaussian([0.0, 0.0, 2.0], [1, 0, 0], 0.5, 0.02)
        pg = project_gaussian(g, Pose.identity(), standard_intrinsics())
        assert np.allclose(pg.center, [16.0, 12.0])
        assert pg.radius == pytest.approx(1.0)
        assert pg.depth == pytest.approx(2.0)

    def test_behind_camera_culled(self):
        g = Gaussian([0.0, 0.0, -2.0], [1, 0, 0], 0.5, 0.02)
        assert project_gaussian(g, Pose.identity(), standard_intrinsics()) is None

    def test_doubling_depth_halves_radius(self):
        k = standard_intrinsics()
        near = project_gaussian(Gaussian([0, 0, 2.0], [1, 0, 0], 0.5, 0.02), Pose.identity(), k)
        far = project_gaussian(Gaussian([0, 0, 4.0], [1, 0, 0], 0.5, 0.02), Pose.identity(), k)
        assert near.radius == pytest.approx(2.0 * far.radius)

    def test_off_image_disc_culled(self):
        g = Gaussian([10.0, 0.0, 1.0], [1, 0, 0], 0.001, 0.001)
        assert project_gaussian(g, Pose.identity(), standard_intrinsics()) is None


class TestAlphaAt:
    def pg(self, radius=2.0):
        return ProjectedGaussian([8.0, 8.0], radius, 1.0)

    def test_at_center_equals_opacity(self):
        assert alpha_at(self.pg(), 0.5, [8.0, 8.0]) == pytest.approx(0.5)

    def test_one_sigma_offset(self):
        a = alpha_at(self.pg(2.0), 1.0, [10.0, 8.0])
        assert a == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_beyond_support_is_zero(self):
        assert alpha_at(self.pg(2.0), 1.0, [16.0, 8.0]) == 0.0

    def test_below_floor_is_zero(self):
        # just inside support but weight under 1/255
        assert alpha_at(self.pg(2.0), 1e-4, [13.0, 8.0]) == 0.0

    def test_clamped(self):
        assert alpha_at(self.pg(), 1.0, [8.0, 8.0]) == pytest.approx(0.999)

    def test_literal_variant_denominator(self):
        a = alpha_at(self.pg(2.0), 1.0, [10.0, 8.0], literal_eq8=True)
        assert a == pytest.approx(math.exp(-4.0 / 4.0), abs=1e-12)


class TestRenderForward:
    def test_empty_map(self):
        k = standard_intrinsics()
        buf = render(GaussianMap(), Pose.identity(), k, background=(0.1, 0.2, 0.3))
        assert np.allclose(buf.color, [0.1, 0.2, 0.3])
        assert not buf.depth.any()
        assert not buf.silhouette.any()

    def test_single_opaque_gaussian_over_background(self):
        k = standard_intrinsics()
        gmap = GaussianMap.from_arrays([[0, 0, 2.0]], [[0.8, 0.1, 0.2]], [1.0], [0.06])
        bg = np.array([0.2, 0.3, 0.4])
        buf = render(gmap, Pose.identity(), k, background=bg)
        # weight clamps at 0.999 at the footprint center (pixel (12, 16))
        assert np.allclose(buf.color[12, 16], 0.999 * np.array([0.8, 0.1, 0.2]) + 0.001 * bg, atol=1e-9)
        assert buf.silhouette[12, 16] == pytest.approx(0.999)
        assert buf.depth[12, 16] == pytest.approx(0.999 * 2.0)

    def test_two_gaussian_hand_compositing(self):
        k = standard_intrinsics()
        front = Gaussian([0.01, -0.02, 1.0], [0.9, 0.2, 0.1], 0.6, 0.03)
        back = Gaussian([-0.03, 0.01, 2.0], [0.1, 0.7, 0.3], 0.8, 0.05)
        gmap = GaussianMap.from_arrays(
            [front.position, back.position],
            [front.color, back.color],
            [front.opacity, back.opacity],
            [front.radius, back.radius],
        )
        bg = np.array([0.05, 0.05, 0.1])
        buf = render(gmap, Pose.identity(), k, background=bg)
        pg1 = project_gaussian(front, Pose.identity(), k)
        pg2 = project_gaussian(back, Pose.identity(), k)
        y = np.array([16.0, 12.0])
        # map construction round-trips opacity through a logit
        o1, o2 = gmap.opacities
        a1 = alpha_at(pg1, o1, y)
        a2 = alpha_at(pg2, o2, y)
        expect_c = a1 * front.color + (1 - a1) * a2 * back.color + (1 - a1) * (1 - a2) * bg
        expect_d = a1 * pg1.depth + (1 - a1) * a2 * pg2.depth
        expect_s = a1 + (1 - a1) * a2
        assert np.abs(buf.color[12, 16] - expect_c).max() < 1e-6
        assert buf.depth[12, 16] == pytest.approx(expect_d, abs=1e-6)
        assert buf.silhouette[12, 16] == pytest.approx(expect_s, abs=1e-6)

    def test_matches_brute_force(self):
        for seed in range(5):
            gmap, pose, intr = wild_scene(seed, n_gaussians=50, width=32, height=32)
            bg = (0.3, 0.1, 0.6)
            tiled = render(gmap, pose, intr, background=bg)
            brute = render_brute(gmap, pose, intr, background=bg)
            assert np.abs(tiled.color - brute.color).max() < 1e-5
            assert np.abs(tiled.depth - brute.depth).max() < 1e-5
            assert np.abs(tiled.silhouette - brute.silhouette).max() < 1e-5

    def test_storage_order_invariance(self):
        gmap, pose, intr = wild_scene(3, n_gaussians=40)
        # include an exact depth tie resolved by the position key
        gmap.add_arrays([[0.3, 0.0, 2.0], [-0.3, 0.0, 2.0]], [[1, 0, 0], [0, 1, 0]], [0.7, 0.7], [0.05, 0.05])
        ref = render(gmap, pose, intr)
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(gmap))
        shuffled = GaussianMap.from_arrays(
            gmap.positions[perm], gmap.colors[perm], gmap.opacities[perm], gmap.radii[perm]
        )
        out = render(shuffled, pose, intr)
        assert np.abs(out.color - ref.color).max() <= 1e-12
        assert np.abs(out.depth - ref.depth).max() <= 1e-12
        assert np.abs(out.silhouette - ref.silhouette).max() <= 1e-12

    def test_silhouette_in_unit_interval(self):
        for seed in range(8):
            gmap, pose, intr = wild_scene(100 + seed)
            buf = render(gmap, pose, intr)
            assert buf.silhouette.min() >= 0.0
            assert buf.silhouette.max() <= 1.0
            assert (buf.depth >= 0.0).all()

    def test_nonuniform_image_size_tiles(self):
        intr = CameraIntrinsics(fx=60.0, fy=60.0, cx=19.0, cy=11.0, width=40, height=23)
        rng = np.random.default_rng(9)
        n = 30
        mu = rng.uniform([-1, -1, 0.5], [1, 1, 4.0], (n, 3))
        gmap = GaussianMap.from_arrays(
            mu, rng.uniform(0, 1, (n, 3)), rng.uniform(0.1, 0.9, n), rng.uniform(0.005, 0.2, n)
        )
        tiled = render(gmap, Pose.identity(), intr)
        brute = render_brute(gmap, Pose.identity(), intr)
        assert np.abs(tiled.color - brute.color).max() < 1e-5


def linear_probe_loss(buffers, probes):
    gc, gd, gs = probes
    return float((buffers.color * gc).sum() + (buffers.depth * gd).sum() + (buffers.silhouette * gs).sum())


def make_probes(seed, intr):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(intr.height, intr.width, 3)),
        rng.normal(size=(intr.height, intr.width)),
        rng.normal(size=(intr.height, intr.width)),
    )


def fd_vs_analytic(gmap, pose, intr, probes):
    """Max relative error between analytic gradients and central
    differences of a linear probe of the render buffers."""
    analytic = render_backward(gmap, pose, intr, *probes)
    names = ("positions", "colors", "opacities", "radii")
    worst = 0.0
    arrays = {
        "positions": gmap.positions,
        "colors": gmap.colors,
        "opacities": gmap.opacities,
        "radii": gmap.radii,
    }
    for p_idx, name in enumerate(names):
        h = FD_STEPS[name]
        base = arrays[name]
        flat = base.reshape(len(gmap), -1)
        grad = np.asarray(analytic[p_idx]).reshape(len(gmap), -1)
        scale = max(np.abs(grad).max(), 1e-12)
        fd = np.zeros_like(flat)
        for i in range(flat.shape[0]):
            for j in range(flat.shape[1]):
                for sign in (1.0, -1.0):
                    bumped = {k: v.copy() for k, v in arrays.items()}
                    bumped[name] = flat.copy()
                    bumped[name][i, j] += sign * h
                    bumped[name] = bumped[name].reshape(base.shape)
                    m = GaussianMap.from_arrays(
                        bumped["positions"], bumped["colors"], bumped["opacities"], bumped["radii"]
                    )
                    val = linear_probe_loss(render(m, pose, intr), probes)
                    fd[i, j] += sign * val
        fd /= 2.0 * h
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-4 * scale + 1e-12)
        worst = max(worst, float((np.abs(fd - grad) / denom).max()))
    return worst


class TestRenderBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        gmap, pose, intr = sample_smooth_scene(0)
        zeros = (
            np.zeros((intr.height, intr.width, 3)),
            np.zeros((intr.height, intr.width)),
            np.zeros((intr.height, intr.width)),
        )
        grads = render_backward(gmap, pose, intr, *zeros)
        for g in grads:
            assert not np.asarray(g).any()

    def test_culled_gaussian_gets_zero_gradient(self):
        gmap, pose, intr = sample_smooth_scene(1, n_gaussians=4)
        gmap.add_arrays([[0.0, 0.0, -3.0]], [[0.5, 0.5, 0.5]], [0.5], [0.05])
        probes = make_probes(11, intr)
        grads = render_backward(gmap, pose, intr, *probes)
        for g in grads:
            assert not np.asarray(g)[-1].any()

    def test_single_gaussian_color_gradient_is_weighted_sum(self):
        intr = standard_intrinsics()
        gmap = GaussianMap.from_arrays([[0, 0, 2.0]], [[0.4, 0.5, 0.6]], [0.7], [0.04])
        buf = render(gmap, Pose.identity(), intr)
        gc = np.random.default_rng(2).normal(size=buf.color.shape)
        zeros = np.zeros_like(buf.depth)
        _, d_col, _, _ = render_backward(gmap, Pose.identity(), intr, gc, zeros, zeros)
        # single splat: per-pixel weight equals the silhouette
        expect = (buf.silhouette[:, :, None] * gc).sum(axis=(0, 1))
        assert np.allclose(d_col[0], expect, atol=1e-9)

    def test_gradients_match_finite_differences(self):
        for seed in range(3):
            gmap, pose, intr = sample_smooth_scene(seed, n_gaussians=6)
            probes = make_probes(500 + seed, intr)
            assert fd_vs_analytic(gmap, pose, intr, probes) < 1e-4

    def test_literal_variant_gradients(self):
        gmap, pose, intr = sample_smooth_scene(7, n_gaussians=5)
        probes = make_probes(70, intr)
        analytic = render_backward(gmap, pose, intr, *probes, literal_eq8=True)
        arrays = [gmap.positions, gmap.colors, gmap.opacities, gmap.radii]
        # spot-check one coordinate of each parameter family
        for p_idx, (name, coord) in enumerate(
            [("positions", (2, 1)), ("colors", (2, 0)), ("opacities", (2,)), ("radii", (2,))]
        ):
            h = FD_STEPS[name]
            vals = []
            for sign in (1.0, -1.0):
                mod = [a.copy() for a in arrays]
                mod[p_idx][coord] += sign * h
                m = GaussianMap.from_arrays(*mod)
                buf = render(m, pose, intr, literal_eq8=True)
                vals.append(linear_probe_loss(buf, probes))
            fd = (vals[0] - vals[1]) / (2.0 * h)
            an = np.asarray(analytic[p_idx])[coord]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-3
