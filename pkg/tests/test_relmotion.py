"""Rigid alignment and RANSAC relative-motion estimation."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lidarsplat.errors import DegenerateConfigurationError, InsufficientInliersError
from lidarsplat.geometry import exp_se3, pose_difference, rotation_angle
from lidarsplat.relmotion import ransac_rigid, rigid_align_svd


def random_rigid(rng):
    return exp_se3(np.concatenate([rng.uniform(-1.5, 1.5, 3), rng.uniform(-2, 2, 3)]))


class TestRigidAlign:
    def test_identity_on_equal_sets(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(-1, 1, size=(30, 3))
        pose = rigid_align_svd(p, p)
        np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(pose.translation, 0.0, atol=1e-12)

    def test_exact_recovery_quantified(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = rng.uniform(-2, 2, size=(100, 3))
            gt = random_rigid(rng)
            pose = rigid_align_svd(p, gt.apply(p))
            rot_err, trans_err = pose_difference(pose, gt)
            assert rot_err < 1e-9
            assert trans_err < 1e-9

    def test_collinear_points_raise(self):
        t = np.linspace(0, 1, 20)
        p = np.column_stack([t, 2 * t, -t])
        q = p + np.array([1.0, 0.0, 0.0])
        with pytest.raises(DegenerateConfigurationError):
            rigid_align_svd(p, q)

    def test_too_few_points_raise(self):
        with pytest.raises(ValueError):
            rigid_align_svd(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_reflection_input_returns_proper_rotation(self):
        # mirrored targets cannot be reached by any rotation; the result
        # must still be proper and as good as a dense rotation search
        rng = np.random.default_rng(2)
        p = rng.uniform(-1, 1, size=(60, 3))
        q = p * np.array([-1.0, 1.0, 1.0])
        pose = rigid_align_svd(p, q)
        assert np.linalg.det(pose.rotation) > 0.999999

        def residual(rot):
            cp = p - p.mean(axis=0)
            cq = q - q.mean(axis=0)
            return np.sum((cp @ rot.T - cq) ** 2)

        got = residual(pose.rotation)
        grid = Rotation.random(50000, random_state=7).as_matrix()
        cp = p - p.mean(axis=0)
        cq = q - q.mean(axis=0)
        # residual for every grid rotation at the optimal translation
        fits = np.einsum("rij,nj->rni", grid, cp) - cq
        best = np.min(np.sum(fits**2, axis=(1, 2)))
        assert got <= best * (1.0 + 1e-9)
        assert best <= got * 1.02


def outlier_problem(seed, n=60, outlier_fraction=0.3, noise=0.0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1.5, 1.5, size=(n, 3))
    gt = random_rigid(rng)
    q = gt.apply(p)
    if noise > 0:
        q = q + rng.normal(0.0, noise, q.shape)
    n_out = int(round(outlier_fraction * n))
    bad = rng.choice(n, size=n_out, replace=False)
    q[bad] = rng.uniform(-5.0, 5.0, size=(n_out, 3))
    return p, q, gt, bad, rng


class TestRansac:
    def test_no_outliers_degenerates_to_full_fit(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(-1, 1, size=(40, 3))
        gt = random_rigid(rng)
        q = gt.apply(p)
        pose, mask, rms = ransac_rigid(p, q, np.random.default_rng(0))
        assert mask.all()
        full = rigid_align_svd(p, q)
        rot_err, trans_err = pose_difference(pose, full)
        assert rot_err < 1e-9 and trans_err < 1e-9
        assert rms < 1e-9

    def test_thirty_percent_outliers_twenty_seeds(self):
        for seed in range(20):
            p, q, gt, _, _ = outlier_problem(seed, noise=0.01)
            pose, mask, rms = ransac_rigid(p, q, np.random.default_rng(100 + seed))
            rot_err = np.degrees(rotation_angle(pose.rotation.T @ gt.rotation))
            trans_err = np.linalg.norm(pose.translation - gt.translation)
            assert rot_err < 0.5, f"seed {seed}: rotation error {rot_err:.3f} deg"
            assert trans_err < 0.02, f"seed {seed}: translation error {trans_err:.4f} m"

    def test_outliers_rejected_from_inlier_set(self):
        p, q, _, bad, _ = outlier_problem(5)
        _, mask, _ = ransac_rigid(p, q, np.random.default_rng(5))
        assert not mask[bad].any()
        assert mask.sum() == p.shape[0] - bad.size

    def test_inlier_set_fixed_point(self):
        for seed in (0, 4, 9):
            p, q, _, _, _ = outlier_problem(seed, noise=0.015)
            pose, mask, _ = ransac_rigid(p, q, np.random.default_rng(seed))
            dist = np.linalg.norm(pose.apply(p) - q, axis=1)
            np.testing.assert_array_equal(dist <= 0.05, mask)

    def test_swapped_sets_give_inverse(self):
        p, q, _, _, _ = outlier_problem(6, noise=0.0)
        fwd, _, _ = ransac_rigid(p, q, np.random.default_rng(1))
        bwd, _, _ = ransac_rigid(q, p, np.random.default_rng(2))
        rot_err, trans_err = pose_difference(bwd, fwd.inverse())
        assert rot_err < 1e-6 and trans_err < 1e-6

    def test_deterministic_given_seed(self):
        p, q, _, _, _ = outlier_problem(7, noise=0.01)
        a = ransac_rigid(p, q, np.random.default_rng(42))
        b = ransac_rigid(p, q, np.random.default_rng(42))
        np.testing.assert_array_equal(a[0].matrix(), b[0].matrix())
        np.testing.assert_array_equal(a[1], b[1])
        assert a[2] == b[2]

    def test_two_matches_precondition(self):
        with pytest.raises(ValueError):
            ransac_rigid(np.zeros((2, 3)), np.zeros((2, 3)), np.random.default_rng(0))

    def test_insufficient_inliers(self):
        rng = np.random.default_rng(8)
        p = rng.uniform(-1, 1, size=(10, 3))
        q = rng.uniform(-1, 1, size=(10, 3))  # unrelated: no rigid model fits 12
        with pytest.raises(InsufficientInliersError):
            ransac_rigid(p, q, np.random.default_rng(0), min_inliers=12)
