"""Trajectory accuracy and image-quality metrics.

Trajectory error follows the usual RGB-D benchmark recipe: associate
estimated and reference poses by timestamp, register the estimated
camera centers onto the reference with a closed-form rigid fit, and
summarize the residual center distances.  Image quality is PSNR on the
[0, 1] range plus the structural-similarity score shared with the map
optimizer.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NoAssociationsError
from .geometry import Pose, rotation_angle
from .splatmap import ssim

ASSOCIATION_TOL = 0.02
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10

CSV_FIELDS = ("scene", "ate_cm", "psnr", "ssim")


@dataclass
class AteReport:
    """Absolute trajectory error summary in meters."""

    rmse: float
    mean: float
    median: float
    max: float
    alignment: Pose  # applied to estimated centers: c -> scale * R c + t
    scale: float = 1.0
    mean_rotation_deg: float = 0.0  # informational, not part of rmse
    n_pairs: int = 0


def associate_timestamps(times_a, times_b, tol=ASSOCIATION_TOL):
    """Greedy one-to-one pairing of nearby timestamps.

    Candidate pairs within ``tol`` seconds are consumed in order of
    increasing time difference; each timestamp is used at most once.
    Returns index pairs (i, j) sorted by i.
    """
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    cand = []
    for i, t in enumerate(times_a):
        dt = np.abs(times_b - t)
        for j in np.flatnonzero(dt <= tol):
            cand.append((float(dt[j]), i, int(j)))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def _align_centers(src, dst, with_scale):
    """Closed-form least-squares (optionally scaled) rigid registration.

    Unlike the RANSAC model fit this tolerates planar and collinear
    center sets: any minimizer of the residual is acceptable for an
    error metric.
    """
    cp = src.mean(axis=0)
    cq = dst.mean(axis=0)
    p = src - cp
    q = dst - cq
    cov = q.T @ p / src.shape[0]
    u, s, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = 1.0
    if with_scale:
        var = float((p * p).sum()) / src.shape[0]
        scale = float((s * sign).sum()) / max(var, 1e-30)
    return rot, scale, cq - scale * rot @ cp


def ate(est, gt, tol=ASSOCIATION_TOL, with_scale=False):
    """Absolute trajectory error of ``est`` against ``gt``.

    Both arguments are lists of (timestamp, world-to-camera pose).
    ``with_scale`` additionally estimates a global scale before
    computing residuals (useful for monocular ablations; the default
    rigid fit is correct when LiDAR fixes the scale).
    """
    pairs = associate_timestamps([t for t, _ in est], [t for t, _ in gt], tol)
    if len(pairs) < 2:
        raise NoAssociationsError(f"only {len(pairs)} trajectory pairs within {tol} s")
    est_poses = [est[i][1] for i, _ in pairs]
    gt_poses = [gt[j][1] for _, j in pairs]
    c_est = np.array([p.inverse().translation for p in est_poses])
    c_gt = np.array([p.inverse().translation for p in gt_poses])
    rot, scale, trans = _align_centers(c_est, c_gt, with_scale)
    dist = np.linalg.norm(scale * c_est @ rot.T + trans - c_gt, axis=1)
    # the alignment re-expresses the estimated world in the reference
    # world, so the rotation error of pose i is R_i R_align^T G_i^T
    ang = [
        rotation_angle(e.rotation @ rot.T @ g.rotation.T)
        for e, g in zip(est_poses, gt_poses)
    ]
    return AteReport(
        rmse=float(np.sqrt((dist**2).mean())),
        mean=float(dist.mean()),
        median=float(np.median(dist)),
        max=float(dist.max()),
        alignment=Pose(rot, trans),
        scale=scale,
        mean_rotation_deg=float(np.degrees(np.mean(ang))),
        n_pairs=len(pairs),
    )


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images on [0, 1].

    Capped at 100 dB once the mean squared error drops below 1e-10 so
    identical images compare equal across platforms.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def ssim_score(a, b):
    """Structural-similarity score (gradient discarded)."""
    return float(ssim(a, b)[0])


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def write_metric_report(path, values):
    """Write metrics as ``key: value`` lines, atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key}: {_fmt(value)}\n")
    os.replace(tmp, path)


def write_metrics_csv(path, rows):
    """Write the per-scene metric table, atomically.

    ``rows`` are mappings with keys scene, ate_cm, psnr and ssim.
    """
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    os.replace(tmp, path)


def read_metrics_csv(path):
    """Read a metric table back; numeric columns become floats."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "scene": row["scene"],
                    "ate_cm": float(row["ate_cm"]),
                    "psnr": float(row["psnr"]),
                    "ssim": float(row["ssim"]),
                }
            )
    return rows
