"""Map construction from LiDAR returns and photometric/depth optimization.

Frames are duck-typed: anything exposing ``image`` (H, W, 3 floats in
[0, 1]) and ``cloud`` ((N, 3) points in the LiDAR frame) works.  Poses
map world to camera; the extrinsic maps LiDAR to camera.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyInitializationError
from .gmap import GaussianMap
from .render import NEAR_CLIP, render, render_pair
from .ssim import ssim

INIT_OPACITY = 0.5


@dataclass
class MapOptimizeConfig:
    iters_per_frame: int = 60
    lr_position: float = 1e-4  # scaled by scene_scale
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_radius: float = 1e-3  # scaled by scene_scale
    prune_opacity: float = 0.005
    lambda_color: float = 0.5
    lambda_depth: float = 1.0
    lambda_ssim: float = 0.2
    keyframe_stride: int = 5
    silhouette_threshold: float = 0.99
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    literal_eq8: bool = False
    scene_scale: float = None  # None -> bounding-box diagonal at first init


@dataclass
class KeyframeView:
    """Supervision for one frame: image, sparse depth and its mask, pose."""

    image: np.ndarray
    depth: np.ndarray
    depth_mask: np.ndarray
    pose: object
    index: int = field(default=-1)


def bilinear_sample(image, u, v):
    """Sample (H, W, C) at continuous (u, v); coordinates are clipped to
    the valid interpolation domain."""
    h, w = image.shape[:2]
    u = np.clip(np.asarray(u, dtype=float), 0.0, w - 1.0)
    v = np.clip(np.asarray(v, dtype=float), 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros_like(u, int)
    y0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros_like(v, int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _spawn_arrays(frame, pose, extrinsic, intrinsics):
    """Candidate splats from one frame's LiDAR returns.

    Returns (positions, colors, opacities, radii, pixel columns, pixel rows)
    for the points that project inside the image.
    """
    cloud = np.asarray(frame.cloud, dtype=float).reshape(-1, 3)
    cam = extrinsic.apply(cloud) if cloud.shape[0] else np.zeros((0, 3))
    z = cam[:, 2]
    keep = z > NEAR_CLIP
    cam = cam[keep]
    z = z[keep]
    u = intrinsics.fx * cam[:, 0] / np.where(z > 0, z, 1.0) + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / np.where(z > 0, z, 1.0) + intrinsics.cy
    inside = (u >= 0.0) & (u <= intrinsics.width - 1.0) & (v >= 0.0) & (v <= intrinsics.height - 1.0)
    cam, z, u, v = cam[inside], z[inside], u[inside], v[inside]
    image = np.asarray(frame.image, dtype=float)
    colors = bilinear_sample(image, u, v) if z.size else np.zeros((0, 3))
    world = pose.inverse().apply(cam) if z.size else np.zeros((0, 3))
    radii = z / intrinsics.mean_focal
    opacities = np.full(z.shape, INIT_OPACITY)
    return world, colors, opacities, radii, u, v


def init_from_frame(frame, pose, extrinsic, intrinsics):
    """Seed splats from every LiDAR point that projects into the image:
    position at the point, color sampled from the image, opacity 0.5,
    radius depth/f (so the splat re-projects to a one-pixel footprint)."""
    world, colors, opacities, radii, _, _ = _spawn_arrays(frame, pose, extrinsic, intrinsics)
    if world.shape[0] == 0:
        raise EmptyInitializationError("no LiDAR point projects inside the image")
    from .types import Gaussian

    return [
        Gaussian(world[i], colors[i], opacities[i], radii[i])
        for i in range(world.shape[0])
    ]


def update_map(
    gmap,
    frame,
    pose,
    extrinsic,
    intrinsics,
    silhouette_threshold=0.99,
    background=(0.0, 0.0, 0.0),
    literal_eq8=False,
):
    """Spawn splats where the map is still transparent.

    Renders the current silhouette and applies the seeding rule to the
    LiDAR points whose projection lands on a pixel with silhouette below
    the threshold.  Returns the number added.
    """
    world, colors, opacities, radii, u, v = _spawn_arrays(frame, pose, extrinsic, intrinsics)
    if world.shape[0] == 0:
        return 0
    if len(gmap) == 0:
        keep = np.ones(world.shape[0], dtype=bool)
    else:
        sil = render(gmap, pose, intrinsics, background, literal_eq8).silhouette
        cols = np.rint(u).astype(int)
        rows = np.rint(v).astype(int)
        keep = sil[rows, cols] < silhouette_threshold
    if not keep.any():
        return 0
    return gmap.add_arrays(world[keep], colors[keep], opacities[keep], radii[keep])


def project_depth_map(cloud, extrinsic, intrinsics):
    """Z-buffered sparse depth from LiDAR: nearest return per pixel.

    Returns (depth (H, W) in meters, hit mask (H, W)).
    """
    h, w = intrinsics.height, intrinsics.width
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    cam = extrinsic.apply(cloud) if cloud.shape[0] else np.zeros((0, 3))
    z = cam[:, 2]
    keep = z > NEAR_CLIP
    cam, z = cam[keep], z[keep]
    u = intrinsics.fx * cam[:, 0] / np.where(z > 0, z, 1.0) + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / np.where(z > 0, z, 1.0) + intrinsics.cy
    inside = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    z, u, v = z[inside], u[inside], v[inside]
    depth = np.full((h, w), np.inf)
    cols = np.rint(u).astype(int)
    rows = np.rint(v).astype(int)
    np.minimum.at(depth, (rows, cols), z)
    mask = np.isfinite(depth)
    depth[~mask] = 0.0
    return depth, mask


def mapping_loss(gmap, keyframes, intrinsics, config=None):
    """Photometric + projected-depth objective over a keyframe set.

    Per keyframe: lambda_color * [(1 - lambda_ssim) L1 + lambda_ssim
    (1 - SSIM)] on the rendered color, plus lambda_depth times the L1
    depth error over masked pixels (normalized by the mask count).
    Averaged over keyframes.  Returns (loss, (d_mu, d_color, d_opacity,
    d_radius)).
    """
    config = config or MapOptimizeConfig()
    n = len(gmap)
    g_mu = np.zeros((n, 3))
    g_col = np.zeros((n, 3))
    g_opa = np.zeros(n)
    g_rad = np.zeros(n)
    total = 0.0
    if not keyframes:
        return 0.0, (g_mu, g_col, g_opa, g_rad)
    share = 1.0 / len(keyframes)
    for kf in keyframes:
        buf, backward = render_pair(
            gmap, kf.pose, intrinsics, config.background, config.literal_eq8
        )
        diff = buf.color - kf.image
        l1 = np.abs(diff).mean()
        ssim_val, ssim_grad = ssim(buf.color, kf.image)
        color_loss = (1.0 - config.lambda_ssim) * l1 + config.lambda_ssim * (1.0 - ssim_val)
        grad_c = config.lambda_color * (
            (1.0 - config.lambda_ssim) * np.sign(diff) / diff.size
            - config.lambda_ssim * ssim_grad
        )
        mask = kf.depth_mask
        count = int(mask.sum())
        if count:
            ddiff = np.where(mask, buf.depth - kf.depth, 0.0)
            depth_loss = np.abs(ddiff).sum() / count
            grad_d = config.lambda_depth * np.sign(ddiff) / count
        else:
            depth_loss = 0.0
            grad_d = np.zeros_like(buf.depth)
        total += share * (config.lambda_color * color_loss + config.lambda_depth * depth_loss)
        grads = backward(share * grad_c, share * grad_d, np.zeros_like(buf.silhouette))
        g_mu += grads[0]
        g_col += grads[1]
        g_opa += grads[2]
        g_rad += grads[3]
    return total, (g_mu, g_col, g_opa, g_rad)


def keyframe_indices(current, stride):
    """Every ``stride``-th processed frame plus the current one."""
    ids = set(range(0, current + 1, stride))
    ids.add(current)
    return sorted(ids)


def optimize_map(gmap, frames, poses, extrinsic, intrinsics, config=None):
    """Incremental mapping over a posed frame sequence.

    Per frame: seed new splats where the silhouette is under-saturated,
    then run ``iters_per_frame`` adaptive gradient steps, each against a
    single keyframe drawn from the shuffled keyframe set (every
    ``keyframe_stride``-th frame plus the current one).  Low-opacity
    splats are pruned after each frame.
    """
    config = config or MapOptimizeConfig()
    rng = np.random.default_rng(config.seed)
    depth_cache = {}
    for f_idx in range(len(frames)):
        update_map(
            gmap,
            frames[f_idx],
            poses[f_idx],
            extrinsic,
            intrinsics,
            config.silhouette_threshold,
            config.background,
            config.literal_eq8,
        )
        if len(gmap) == 0:
            continue
        if gmap.scene_scale is None:
            gmap.scene_scale = config.scene_scale or _bbox_diagonal(gmap.positions)
        kf_ids = keyframe_indices(f_idx, config.keyframe_stride)
        gmap.keyframes = list(kf_ids)
        views = []
        for i in kf_ids:
            if i not in depth_cache:
                depth_cache[i] = project_depth_map(frames[i].cloud, extrinsic, intrinsics)
            d, m = depth_cache[i]
            views.append(KeyframeView(np.asarray(frames[i].image, dtype=float), d, m, poses[i], i))
        order = rng.permutation(len(views))
        lrs = {
            "mu": config.lr_position * gmap.scene_scale,
            "color": config.lr_color,
            "opacity": config.lr_opacity,
            "radius": config.lr_radius * gmap.scene_scale,
        }
        for it in range(config.iters_per_frame):
            view = views[order[it % len(order)]]
            _, grads = mapping_loss(gmap, [view], intrinsics, config)
            gmap.adam_step(grads, lrs)
        gmap.prune(gmap.opacities >= config.prune_opacity)
    return gmap


def _bbox_diagonal(points):
    if points.shape[0] == 0:
        return 1.0
    span = points.max(axis=0) - points.min(axis=0)
    return max(float(np.linalg.norm(span)), 1e-6)
