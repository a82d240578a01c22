"""Shared helpers: randomized splat scenes that keep every (splat, pixel)
pair away from the rasterizer's piecewise boundaries (support cutoff,
weight floor, opacity clamp, depth ties), so central finite differences
are a valid gradient oracle."""

import numpy as np

from lidarsplat.geometry import CameraIntrinsics, Pose
from lidarsplat.splatmap import GaussianMap
from lidarsplat.splatmap.render import ALPHA_MIN, SUPPORT_SIGMAS


def smooth_scene_intrinsics(size=16):
    f = 2.0 * size
    c = size / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


# finite-difference steps sized so a central bump cannot push any pair
# across a boundary that the sampler's margins keep clear
FD_STEPS = {"positions": 1e-5, "colors": 1e-4, "opacities": 1e-6, "radii": 1e-5}


def sample_smooth_scene(seed, n_gaussians=10, size=16):
    """Scene whose render is smooth in every parameter near the sample.

    Rejects draws where any (splat, pixel) pair sits within 2e-3 px of
    the 3-sigma support edge, within 5e-6 of the 1/255 weight floor, or
    where two splats are within 1e-3 m in depth (sort-order ties).  The
    margins exceed what the FD_STEPS bumps can move a pair by, and the
    sampled opacities stay below the clamp.  Returns (map, pose,
    intrinsics).
    """
    intr = smooth_scene_intrinsics(size)
    px, py = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    px = px.ravel()
    py = py.ravel()
    for attempt in range(2000):
        rng = np.random.default_rng([seed, attempt])
        z = rng.uniform(1.5, 4.0, n_gaussians)
        u = rng.uniform(0.2 * size, 0.8 * size, n_gaussians)
        v = rng.uniform(0.2 * size, 0.8 * size, n_gaussians)
        rpix = rng.uniform(1.2, 3.0, n_gaussians)
        opa = rng.uniform(0.15, 0.9, n_gaussians)
        col = rng.uniform(0.05, 0.95, (n_gaussians, 3))

        rho = np.hypot(u[:, None] - px[None, :], v[:, None] - py[None, :])
        if np.abs(rho - SUPPORT_SIGMAS * rpix[:, None]).min() < 2e-3:
            continue
        alpha = opa[:, None] * np.exp(-(rho ** 2) / (2.0 * rpix[:, None] ** 2))
        if np.abs(alpha - ALPHA_MIN).min() < 5e-6:
            continue
        dz = np.abs(z[:, None] - z[None, :])
        if (dz + np.eye(n_gaussians)).min() < 1e-3:
            continue

        x = (u - intr.cx) * z / intr.fx
        y = (v - intr.cy) * z / intr.fy
        radii = rpix * z / intr.mean_focal
        gmap = GaussianMap.from_arrays(np.stack([x, y, z], 1), col, opa, radii)
        return gmap, Pose.identity(), intr
    raise RuntimeError(f"no smooth scene found for seed {seed}")


def wild_scene(seed, n_gaussians=50, width=32, height=32):
    """Unconstrained random scene: off-image, behind-camera and clamped
    splats are all allowed."""
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(
        fx=1.5 * width, fy=1.4 * width, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )
    mu = rng.uniform([-2.0, -2.0, -0.5], [2.0, 2.0, 6.0], (n_gaussians, 3))
    col = rng.uniform(0.0, 1.0, (n_gaussians, 3))
    opa = rng.uniform(0.01, 1.0, n_gaussians)
    radii = rng.uniform(1e-3, 0.3, n_gaussians)
    gmap = GaussianMap.from_arrays(mu, col, opa, radii)
    return gmap, Pose.identity(), intr
