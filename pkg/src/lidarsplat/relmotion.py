"""Rigid relative motion between frames from 3D-3D correspondences.

The closed-form alignment is the Kabsch/Umeyama estimator (centroid
subtraction + SVD of the cross-covariance, determinant-sign corrected),
wrapped by a fixed-iteration RANSAC over 3-point samples.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, InsufficientInliersError
from .geometry import Pose

RANSAC_ITERS = 1000
INLIER_THRESH = 0.05
MIN_INLIERS = 12


@dataclass
class RelativeMotionEdge:
    """Measured transform between two frames (maps j-coords into i-coords)."""

    i: int
    j: int
    pose: Pose
    inlier_count: int = 0
    inlier_rms: float = 0.0


def rigid_align_svd(source, target):
    """Least-squares rigid transform T with T(source) ~= target.

    Proper rotation is enforced by flipping the sign of the smallest
    singular direction when the raw solution is a reflection.
    """
    p = np.asarray(source, dtype=float).reshape(-1, 3)
    q = np.asarray(target, dtype=float).reshape(-1, 3)
    if p.shape != q.shape or p.shape[0] < 3:
        raise ValueError("need at least 3 paired points")
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    cross = (q - cq).T @ (p - cp)
    u, s, vt = np.linalg.svd(cross)
    if s[1] <= max(s[0] * 1e-9, 1e-15):
        raise DegenerateConfigurationError("cross-covariance rank < 2 (collinear points)")
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return Pose(rot, cq - rot @ cp)


def _classify(pose, p, q, thresh):
    residual = pose.apply(p) - q
    dist = np.linalg.norm(residual, axis=1)
    return dist <= thresh, dist


def ransac_rigid(
    source,
    target,
    rng,
    iters=RANSAC_ITERS,
    inlier_thresh=INLIER_THRESH,
    min_inliers=MIN_INLIERS,
):
    """Robust rigid fit: T(source) ~= target under gross outliers.

    Fixed number of 3-point hypotheses; the best model by inlier count
    (ties broken by inlier RMS) is re-fit on its inliers until the
    inlier set is stable.  Returns (pose, inlier mask, inlier RMS).
    """
    p = np.asarray(source, dtype=float).reshape(-1, 3)
    q = np.asarray(target, dtype=float).reshape(-1, 3)
    n = p.shape[0]
    if p.shape != q.shape or n < 3:
        raise ValueError("need at least 3 matches")

    best = None  # (count, rms, mask)
    for _ in range(iters):
        pick = rng.choice(n, size=3, replace=False)
        try:
            model = rigid_align_svd(p[pick], q[pick])
        except DegenerateConfigurationError:
            continue
        mask, dist = _classify(model, p, q, inlier_thresh)
        count = int(mask.sum())
        if count < 3:
            continue
        rms = float(np.sqrt(np.mean(dist[mask] ** 2)))
        if best is None or count > best[0] or (count == best[0] and rms < best[1]):
            best = (count, rms, mask)

    if best is None or best[0] < min_inliers:
        found = 0 if best is None else best[0]
        raise InsufficientInliersError(f"{found} inliers, need {min_inliers}")

    mask = best[2]
    # refit until the inlier classification is a fixed point of the model;
    # the returned mask is always the classification under the returned model
    for _ in range(100):
        try:
            model = rigid_align_svd(p[mask], q[mask])
        except DegenerateConfigurationError as exc:
            raise InsufficientInliersError(f"inlier set degenerate: {exc}") from exc
        new_mask, dist = _classify(model, p, q, inlier_thresh)
        stable = np.array_equal(new_mask, mask)
        mask = new_mask
        if stable or mask.sum() < 3:
            break
    count = int(mask.sum())
    if count < min_inliers:
        raise InsufficientInliersError(f"{count} inliers after refit, need {min_inliers}")
    rms = float(np.sqrt(np.mean(dist[mask] ** 2)))
    return model, mask, rms
