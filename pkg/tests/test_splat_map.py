import struct
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import wild_scene

from lidarsplat.errors import DimensionMismatchError, EmptyInitializationError
from lidarsplat.geometry import CameraIntrinsics, Pose, exp_se3
from lidarsplat.splatmap import (
    GaussianMap,
    MapOptimizeConfig,
    init_from_frame,
    load_map,
    mapping_loss,
    optimize_map,
    project_depth_map,
    project_gaussian,
    render,
    save_map,
    ssim,
    update_map,
)
from lidarsplat.splatmap.mapping import KeyframeView, keyframe_indices


def standard_intrinsics():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=12.0, width=32, height=24)


class TestSsim:
    def test_identical_images_score_one_exactly(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (20, 24, 3))
        score, grad = ssim(x, x)
        assert score == 1.0
        assert np.abs(grad).max() < 1e-8

    def test_anticorrelated_checkerboard_negative(self):
        yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        board = ((xx + yy) % 2).astype(float)
        score, _ = ssim(board, 1.0 - board)
        assert score < 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            ssim(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.1, 0.9, (16, 16))
        y = rng.uniform(0.1, 0.9, (16, 16))
        _, grad = ssim(x, y)
        h = 1e-5
        worst = 0.0
        for i in range(16):
            for j in range(16):
                xp = x.copy()
                xp[i, j] += h
                xm = x.copy()
                xm[i, j] -= h
                fd = (ssim(xp, y)[0] - ssim(xm, y)[0]) / (2 * h)
                denom = max(abs(fd), abs(grad[i, j]), 1e-6)
                worst = max(worst, abs(fd - grad[i, j]) / denom)
        assert worst < 1e-4

    def test_gradient_matches_finite_differences_color(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0.1, 0.9, (8, 9, 3))
        y = rng.uniform(0.1, 0.9, (8, 9, 3))
        _, grad = ssim(x, y)
        h = 1e-5
        for idx in [(0, 0, 0), (3, 4, 1), (7, 8, 2), (5, 2, 0)]:
            xp = x.copy()
            xp[idx] += h
            xm = x.copy()
            xm[idx] -= h
            fd = (ssim(xp, y)[0] - ssim(xm, y)[0]) / (2 * h)
            assert abs(fd - grad[idx]) / max(abs(fd), 1e-6) < 1e-4

    def test_constant_shift_score_below_one(self):
        x = np.full((16, 16), 0.4)
        score, _ = ssim(x + 0.2, x)
        assert 0.0 < score < 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        gmap, _, _ = wild_scene(5, n_gaussians=17)
        path = tmp_path / "map.bin"
        save_map(gmap, path)
        loaded = load_map(path)
        assert len(loaded) == 17
        assert np.array_equal(loaded.positions, gmap.positions)  # f64 exact
        assert np.abs(loaded.colors - gmap.colors).max() < 1e-6
        assert np.abs(loaded.opacities - gmap.opacities).max() < 1e-6
        assert np.abs(loaded.radii - gmap.radii).max() < 1e-6 * gmap.radii.max()

    def test_empty_map_round_trip(self, tmp_path):
        path = tmp_path / "map.bin"
        save_map(GaussianMap(), path)
        assert len(load_map(path)) == 0

    def test_header_layout(self, tmp_path):
        gmap = GaussianMap.from_arrays([[1, 2, 3.0]], [[0.5, 0.5, 0.5]], [0.5], [0.1])
        path = tmp_path / "map.bin"
        save_map(gmap, path)
        raw = path.read_bytes()
        count, version = struct.unpack("<QI", raw[:12])
        assert count == 1
        assert version == 1
        # record: 3 f64 + 3 f32 + f32 + f32 = 44 bytes
        assert len(raw) == 12 + 44
        assert struct.unpack("<3d", raw[12:36]) == (1.0, 2.0, 3.0)

    def test_rejects_bad_opacity(self, tmp_path):
        path = tmp_path / "map.bin"
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QI", 1, 1))
            fh.write(struct.pack("<3d", 0, 0, 1))
            fh.write(struct.pack("<3f", 0.5, 0.5, 0.5))
            fh.write(struct.pack("<f", 1.5))  # opacity out of range
            fh.write(struct.pack("<f", 0.1))
        with pytest.raises(ValueError):
            load_map(path)

    def test_rejects_truncation_and_bad_version(self, tmp_path):
        path = tmp_path / "map.bin"
        path.write_bytes(struct.pack("<QI", 5, 1))
        with pytest.raises(ValueError):
            load_map(path)
        path.write_bytes(struct.pack("<QI", 0, 9))
        with pytest.raises(ValueError):
            load_map(path)


def make_frame(intr, depth=2.0):
    """Flat test frame: horizontal color ramp image, axis-aligned cloud."""
    h, w = intr.height, intr.width
    ramp = np.linspace(0.0, 1.0, w)
    image = np.zeros((h, w, 3))
    image[:, :, 0] = ramp
    image[:, :, 1] = 0.5
    image[:, :, 2] = ramp[::-1]
    cloud = np.array([[0.0, 0.0, depth]])
    return SimpleNamespace(image=image, cloud=cloud)


class TestInitFromFrame:
    def test_on_axis_point(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        out = init_from_frame(frame, Pose.identity(), Pose.identity(), intr)
        assert len(out) == 1
        g = out[0]
        assert g.opacity == 0.5
        assert g.radius == pytest.approx(2.0 / 100.0)
        assert np.allclose(g.position, [0, 0, 2.0])
        assert np.allclose(g.color, frame.image[12, 16])

    def test_point_outside_image_excluded(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        frame.cloud = np.vstack([frame.cloud, [[10.0, 0.0, 1.0]]])
        out = init_from_frame(frame, Pose.identity(), Pose.identity(), intr)
        assert len(out) == 1

    def test_all_points_behind_raises(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        frame.cloud = np.array([[0.0, 0.0, -1.0]])
        with pytest.raises(EmptyInitializationError):
            init_from_frame(frame, Pose.identity(), Pose.identity(), intr)

    def test_created_gaussian_reprojects_to_unit_footprint(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        g = init_from_frame(frame, Pose.identity(), Pose.identity(), intr)[0]
        pg = project_gaussian(g, Pose.identity(), intr)
        assert pg.radius == pytest.approx(1.0, abs=1e-12)

    def test_extrinsic_and_pose_applied(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        extrinsic = exp_se3([0.0, 0.0, 0.0, 0.05, -0.02, 0.1])
        pose = exp_se3([0.1, -0.05, 0.2, 0.3, 0.1, -0.2])
        frame.cloud = extrinsic.inverse().apply(np.array([[0.0, 0.0, 2.0]]))
        g = init_from_frame(frame, pose, extrinsic, intr)[0]
        # position is the world-frame point behind the camera-frame sample
        assert np.allclose(g.position, pose.inverse().apply([0.0, 0.0, 2.0]), atol=1e-12)


class TestUpdateMap:
    def test_empty_map_adds_every_in_image_point(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        rng = np.random.default_rng(3)
        frame.cloud = np.column_stack(
            [rng.uniform(-0.2, 0.2, 30), rng.uniform(-0.15, 0.15, 30), rng.uniform(1.5, 3.0, 30)]
        )
        gmap = GaussianMap()
        added = update_map(gmap, frame, Pose.identity(), Pose.identity(), intr)
        assert added == 30
        assert len(gmap) == 30

    def test_saturated_map_adds_nothing(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        # one huge opaque splat saturates the whole image
        gmap = GaussianMap.from_arrays([[0, 0, 2.0]], [[0.5, 0.5, 0.5]], [1.0], [10.0])
        sil = render(gmap, Pose.identity(), intr).silhouette
        assert sil.min() >= 0.99
        added = update_map(gmap, frame, Pose.identity(), Pose.identity(), intr)
        assert added == 0

    def test_half_covered_scene_counts(self):
        intr = standard_intrinsics()
        frame = make_frame(intr)
        # opaque splat footprint centered on pixel (12, 5); its 3-sigma
        # support (6 px) cannot reach the right-half test pixel (12, 25)
        cover = GaussianMap.from_arrays(
            [[(5.0 - intr.cx) * 2.0 / intr.fx, 0.0, 2.0]], [[1, 1, 1]], [1.0], [2.0 * 2.0 / intr.mean_focal]
        )
        sil = render(cover, Pose.identity(), intr).silhouette
        assert sil[12, 5] >= 0.99
        assert sil[12, 25] < 0.99
        covered = [(5.0 - intr.cx) * 2.0 / intr.fx, 0.0, 2.0]
        uncovered = [(25.0 - intr.cx) * 2.0 / intr.fx, 0.0, 2.0]
        frame.cloud = np.array([covered, uncovered])
        added = update_map(cover, frame, Pose.identity(), Pose.identity(), intr)
        assert added == 1
        assert np.allclose(cover.positions[-1], uncovered)


class TestProjectDepthMap:
    def test_nearest_return_wins(self):
        intr = standard_intrinsics()
        cloud = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 1.5]])
        depth, mask = project_depth_map(cloud, Pose.identity(), intr)
        assert mask[12, 16]
        assert depth[12, 16] == pytest.approx(1.5)
        assert mask.sum() == 1
        assert depth[0, 0] == 0.0

    def test_empty_cloud(self):
        intr = standard_intrinsics()
        depth, mask = project_depth_map(np.zeros((0, 3)), Pose.identity(), intr)
        assert not mask.any()
        assert not depth.any()


def self_consistent_scene(seed=0, n=40, width=48, height=36, n_frames=3):
    """Ground-truth splat slab viewed by a small camera sweep; frames carry
    images rendered from the ground truth and clouds sampling its centers."""
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(fx=60.0, fy=60.0, cx=width / 2, cy=height / 2, width=width, height=height)
    mu = np.column_stack(
        [rng.uniform(-1.2, 1.2, n), rng.uniform(-0.9, 0.9, n), rng.uniform(2.0, 3.0, n)]
    )
    colors = rng.uniform(0.1, 0.9, (n, 3))
    opacities = rng.uniform(0.4, 0.9, n)
    radii = rng.uniform(0.05, 0.12, n)
    gt = GaussianMap.from_arrays(mu, colors, opacities, radii)
    extrinsic = exp_se3([0.02, -0.01, 0.03, 0.05, 0.02, -0.04])
    poses = [exp_se3([0.0, 0.02 * i, 0.0, 0.03 * i, 0.0, 0.0]) for i in range(n_frames)]
    frames = []
    for pose in poses:
        buf = render(gt, pose, intr)
        cam = pose.apply(mu)
        vis = cam[:, 2] > 0.1
        cloud = extrinsic.inverse().apply(cam[vis])
        frames.append(SimpleNamespace(image=buf.color, cloud=cloud))
    return gt, frames, poses, extrinsic, intr


class TestMappingLoss:
    def test_perfect_map_zero_loss_zero_grads(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene()
        buf = render(gt, poses[0], intr)
        depth, mask = buf.depth.copy(), buf.silhouette > 0.5
        depth[~mask] = 0.0
        view = KeyframeView(buf.color.copy(), depth, mask, poses[0])
        # depth supervision equals the rendered depth only where mask holds
        view.depth = np.where(mask, render(gt, poses[0], intr).depth, 0.0)
        loss, grads = mapping_loss(gt, [view], intr)
        assert loss == 0.0
        for g in grads:
            assert np.abs(np.asarray(g)).max() < 1e-12

    def test_default_weights(self):
        cfg = MapOptimizeConfig()
        assert cfg.lambda_color == 0.5
        assert cfg.lambda_depth == 1.0
        assert cfg.lambda_ssim == 0.2

    def test_depth_term_is_homogeneous(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene()
        buf = render(gt, poses[0], intr)
        mask = buf.silhouette > 0.5
        cfg = MapOptimizeConfig(lambda_color=0.0)
        losses = []
        for shift in (0.1, 0.2):
            view = KeyframeView(buf.color, np.where(mask, buf.depth + shift, 0.0), mask, poses[0])
            losses.append(mapping_loss(gt, [view], intr, cfg)[0])
        assert losses[1] == pytest.approx(2.0 * losses[0], rel=1e-12)

    def test_unmasked_pixels_ignored(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene()
        buf = render(gt, poses[0], intr)
        mask = buf.silhouette > 0.5
        garbage = np.where(mask, buf.depth, 999.0)
        view = KeyframeView(buf.color, garbage, mask, poses[0])
        loss, _ = mapping_loss(gt, [view], intr)
        assert loss == 0.0


class TestOptimizeMap:
    def test_keyframe_selection(self):
        assert keyframe_indices(11, 5) == [0, 5, 10, 11]
        assert keyframe_indices(0, 5) == [0]
        assert keyframe_indices(10, 5) == [0, 5, 10]

    def test_zero_iterations_only_updates_and_prunes(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene()
        cfg = MapOptimizeConfig(iters_per_frame=0)
        gmap = GaussianMap()
        optimize_map(gmap, frames[:1], poses[:1], extrinsic, intr, cfg)
        cam = extrinsic.apply(frames[0].cloud)
        u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
        v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
        inside = (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
        assert len(gmap) == int(inside.sum())
        assert not gmap.steps.any()
        # positions exactly the seeded world points
        world = poses[0].inverse().apply(cam[inside])
        assert np.allclose(np.sort(gmap.positions[:, 0]), np.sort(world[:, 0]), atol=1e-12)

    def test_self_consistent_scene_reaches_high_psnr(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene()
        cfg = MapOptimizeConfig(
            iters_per_frame=150,
            seed=4,
            lr_radius=3e-3,
            lr_opacity=0.1,
            lr_color=7.5e-3,
            lr_position=3e-4,
        )
        gmap = GaussianMap()
        optimize_map(gmap, frames, poses, extrinsic, intr, cfg)
        buf = render(gmap, poses[0], intr)
        mse = float(((buf.color - frames[0].image) ** 2).mean())
        psnr = 10.0 * np.log10(1.0 / mse)
        # observed 32.85 dB with these seeds; 31 is the regression floor
        assert psnr >= 31.0, f"training-view psnr {psnr:.2f} dB"

    def test_pruning_cannot_raise_loss_much(self):
        gt, frames, poses, extrinsic, intr = self_consistent_scene(seed=2)
        cfg = MapOptimizeConfig(iters_per_frame=30, seed=1)
        gmap = GaussianMap()
        optimize_map(gmap, frames, poses, extrinsic, intr, cfg)
        # rebuild the final keyframe views and compare loss around a prune
        views = []
        for i in gmap.keyframes:
            d, m = project_depth_map(frames[i].cloud, extrinsic, intr)
            views.append(KeyframeView(frames[i].image, d, m, poses[i]))
        before = mapping_loss(gmap, views, intr, cfg)[0]
        gmap.prune(gmap.opacities >= cfg.prune_opacity)
        after = mapping_loss(gmap, views, intr, cfg)[0]
        assert after <= before + 1e-3