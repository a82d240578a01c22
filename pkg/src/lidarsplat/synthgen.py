"""Synthetic worlds: splat scenes with simulated camera and LiDAR data.

A world is a box room whose walls carry colored isotropic splats, plus
scattered interior clutter.  Camera images are rendered from the
ground-truth map with the shared forward rasterizer, LiDAR clouds are
the visible splat centers expressed in the LiDAR frame through the
ground-truth extrinsic, and per-frame feature tables hold exact
landmark projections.  Everything is deterministic given (spec, seed).
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import WorldSpecError
from .geometry import CameraIntrinsics, Pose, exp_so3
from .ingest import (
    Frame,
    save_feature_table,
    save_image,
    save_ply,
    write_calibration,
    write_trajectory,
)
from .splatmap import Gaussian, GaussianMap, render, save_map

MIN_DEPTH = 0.2


@dataclass
class WorldSpec:
    """Parameters of a synthetic world; defaults are desk scale."""

    n_frames: int = 20
    n_gaussians: int = 2000
    n_landmarks: int = 1200
    width: int = 160
    height: int = 120
    focal: float = 140.0
    room_half: tuple = (2.0, 1.5, 2.5)  # half extents in x, y, z
    clutter_fraction: float = 0.12
    radius_range: tuple = (0.025, 0.06)
    surface_samples: int = 12  # LiDAR returns per visible splat disc
    opacity_range: tuple = (0.65, 0.95)
    arc_radius: float = 0.9
    arc_span_deg: float = 150.0
    pixel_sigma: float = 0.0
    point_sigma: float = 0.0
    outlier_fraction: float = 0.0
    min_visible: int = 50
    extrinsic_rotvec: tuple = (0.02, -0.03, 0.015)
    extrinsic_trans: tuple = (0.08, -0.04, 0.05)

    def validate(self):
        if self.n_frames < 2:
            raise WorldSpecError(f"need at least 2 frames, got {self.n_frames}")
        if self.n_gaussians < 8:
            raise WorldSpecError(f"need at least 8 gaussians, got {self.n_gaussians}")
        if not (0 < self.n_landmarks <= self.n_gaussians):
            raise WorldSpecError("landmark count must be in (0, n_gaussians]")
        if self.width < 16 or self.height < 16:
            raise WorldSpecError(f"image {self.width}x{self.height} too small")
        if self.focal <= 0:
            raise WorldSpecError("focal length must be positive")
        if min(self.room_half) <= 0:
            raise WorldSpecError("room extents must be positive")
        if not 0 <= self.clutter_fraction <= 1:
            raise WorldSpecError("clutter_fraction outside [0, 1]")
        for lo, hi in (self.radius_range, self.opacity_range):
            if not 0 < lo <= hi:
                raise WorldSpecError("invalid parameter range")
        if self.arc_radius <= 0 or self.arc_radius >= min(self.room_half) * 0.9:
            raise WorldSpecError("camera arc must stay well inside the room")
        if self.pixel_sigma < 0 or self.point_sigma < 0:
            raise WorldSpecError("noise sigmas must be non-negative")
        if not 0 <= self.outlier_fraction < 1:
            raise WorldSpecError("outlier_fraction outside [0, 1)")
        if self.min_visible < 1:
            raise WorldSpecError("min_visible must be positive")
        if self.surface_samples < 1:
            raise WorldSpecError("surface_samples must be positive")

    def intrinsics(self):
        return CameraIntrinsics(
            self.focal, self.focal, self.width / 2.0, self.height / 2.0, self.width, self.height
        )


@dataclass
class SyntheticWorld:
    """Ground truth behind a generated dataset."""

    gt_map: list  # of Gaussian
    gt_trajectory: list  # of (timestamp, world-to-camera Pose)
    gt_extrinsic: Pose
    intrinsics: CameraIntrinsics
    spec: WorldSpec
    seed: int
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def map(self):
        g = self.gt_map
        return GaussianMap.from_arrays(
            [x.position for x in g],
            [x.color for x in g],
            [x.opacity for x in g],
            [x.radius for x in g],
        )


# wall layout: (center, in-plane axis 1, axis 2, base color)
def _walls(half):
    hx, hy, hz = half
    ex, ey, ez = np.eye(3)
    return [
        (np.array([0.0, 0.0, hz]), ex * hx, ey * hy, np.array([0.75, 0.55, 0.35])),
        (np.array([0.0, 0.0, -hz]), ex * hx, ey * hy, np.array([0.40, 0.55, 0.75])),
        (np.array([hx, 0.0, 0.0]), ez * hz, ey * hy, np.array([0.55, 0.70, 0.45])),
        (np.array([-hx, 0.0, 0.0]), ez * hz, ey * hy, np.array([0.70, 0.45, 0.60])),
        (np.array([0.0, hy, 0.0]), ex * hx, ez * hz, np.array([0.50, 0.45, 0.40])),
        (np.array([0.0, -hy, 0.0]), ex * hx, ez * hz, np.array([0.85, 0.85, 0.80])),
    ]


def _scene_gaussians(spec, rng):
    """Splats plus a fixed in-plane basis per splat.

    Every splat is treated as a small surface disc: wall splats lie in
    their wall's plane, interior clutter gets a random but permanent
    orientation.  LiDAR returns are drawn from these discs, so the
    simulated surfaces are consistent across frames.
    """
    walls = _walls(spec.room_half)
    areas = np.array([4.0 * np.linalg.norm(b1) * np.linalg.norm(b2) for _, b1, b2, _ in walls])
    n_clutter = int(round(spec.n_gaussians * spec.clutter_fraction))
    n_wall = spec.n_gaussians - n_clutter
    counts = np.floor(areas / areas.sum() * n_wall).astype(int)
    counts[0] += n_wall - counts.sum()

    positions, colors, bases = [], [], []
    for (center, b1, b2, base), m in zip(walls, counts):
        # keep a margin at the wall junctions: corner neighbourhoods mix
        # two planes and poison both normals and point-to-plane pairing
        lim1 = 1.0 - 0.3 / np.linalg.norm(b1)
        lim2 = 1.0 - 0.3 / np.linalg.norm(b2)
        uv = rng.uniform(-1.0, 1.0, size=(m, 2)) * np.array([lim1, lim2])
        positions.append(center + uv[:, :1] * b1 + uv[:, 1:] * b2)
        colors.append(np.clip(base + rng.uniform(-0.18, 0.18, size=(m, 3)), 0.05, 0.98))
        e1 = b1 / np.linalg.norm(b1)
        e2 = b2 / np.linalg.norm(b2)
        bases.append(np.broadcast_to(np.stack([e1, e2]), (m, 2, 3)))

    # clutter floats in the interior, clear of the camera arc and of
    # other clutter: separation must exceed the point-to-plane pairing
    # radius plus two disc radii or unrelated discs get paired
    hx, hy, hz = spec.room_half
    min_sep = 0.35
    keep = []
    while len(keep) < n_clutter:
        cand = rng.uniform(-1.0, 1.0, size=3) * np.array([hx - 0.4, hy - 0.3, hz - 0.4])
        if np.linalg.norm(cand[[0, 2]]) <= spec.arc_radius + 0.45:
            continue
        if keep and np.linalg.norm(np.array(keep) - cand, axis=1).min() < min_sep:
            continue
        keep.append(cand)
    if keep:
        positions.append(np.array(keep))
        colors.append(rng.uniform(0.1, 0.95, size=(n_clutter, 3)))
        for _ in range(n_clutter):
            axis = exp_so3(rng.normal(size=3))
            bases.append(axis[:2][None, :, :])

    positions = np.vstack(positions)
    colors = np.vstack(colors)
    bases = np.vstack(bases)
    opacities = rng.uniform(*spec.opacity_range, size=spec.n_gaussians)
    radii = rng.uniform(*spec.radius_range, size=spec.n_gaussians)
    gaussians = [
        Gaussian(positions[i], colors[i], opacities[i], radii[i])
        for i in range(spec.n_gaussians)
    ]
    return gaussians, bases


def _look_at(eye, target, roll):
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    # roll about the viewing axis keeps all rotation axes excited,
    # which the extrinsic solve needs for full observability
    rot = exp_so3(np.array([0.0, 0.0, roll])) @ rot
    return Pose(rot, -rot @ eye)


def _arc_trajectory(spec):
    span = np.radians(spec.arc_span_deg)
    poses = []
    for i in range(spec.n_frames):
        s = i / (spec.n_frames - 1)
        ang = (s - 0.5) * span
        eye = np.array(
            [
                spec.arc_radius * np.sin(ang),
                0.22 * np.sin(2.0 * np.pi * s + 0.7),
                spec.arc_radius * np.cos(ang) * 0.8 - 0.15,
            ]
        )
        # aim angle is a damped copy of the arc angle so the end frames
        # look across the room instead of at the nearest wall
        aim_ang = 0.55 * ang + 0.35 * np.sin(3.1 * s)
        aim = np.array(
            [
                1.6 * np.sin(aim_ang),
                0.5 * np.sin(2.6 * s + 1.8),
                1.6 * np.cos(aim_ang),
            ]
        )
        poses.append((float(i), _look_at(eye, eye + aim, 0.06 * np.sin(4.3 * s + 0.9))))
    return poses


def _visible(intr, cam_pts):
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam_pts[:, 0] / z + intr.cx
        v = intr.fy * cam_pts[:, 1] / z + intr.cy
    ok = (z > MIN_DEPTH) & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    return ok, u, v


def generate(spec=None, seed=0):
    """Build a world and its simulated frames.

    Returns (SyntheticWorld, list of Frame).  Frames carry rendered
    float images, LiDAR clouds in the sensor frame (with noise and
    outliers per spec) and exact landmark observation tables.
    """
    spec = spec or WorldSpec()
    spec.validate()
    intr = spec.intrinsics()
    rng = np.random.default_rng([seed, 8191])
    gaussians, disc_bases = _scene_gaussians(spec, rng)
    trajectory = _arc_trajectory(spec)
    extrinsic = Pose(
        exp_so3(np.array(spec.extrinsic_rotvec, dtype=float)),
        np.array(spec.extrinsic_trans, dtype=float),
    )
    landmark_ids = np.sort(
        rng.choice(spec.n_gaussians, size=spec.n_landmarks, replace=False)
    )
    world = SyntheticWorld(gaussians, trajectory, extrinsic, intr, spec, seed, landmark_ids)

    gmap = world.map()
    centers = gmap.positions
    radii = gmap.radii
    extr_inv = extrinsic.inverse()
    frames = []
    for i, (stamp, pose) in enumerate(trajectory):
        cam = pose.apply(centers)
        ok, u, v = _visible(intr, cam)
        n_vis = int(ok.sum())
        if n_vis < spec.min_visible:
            raise WorldSpecError(
                f"frame {i} sees {n_vis} gaussians, below min_visible {spec.min_visible}"
            )
        # LiDAR returns: the center of every visible disc plus extra
        # in-disc samples, drawn fresh per frame
        s_rng = np.random.default_rng([seed, 4099, i])
        vis = np.flatnonzero(ok)
        surf = [centers[vis]]
        for _ in range(spec.surface_samples - 1):
            rad = radii[vis] * np.sqrt(s_rng.uniform(size=vis.size))
            theta = s_rng.uniform(0.0, 2.0 * np.pi, size=vis.size)
            offs = (
                (rad * np.cos(theta))[:, None] * disc_bases[vis, 0]
                + (rad * np.sin(theta))[:, None] * disc_bases[vis, 1]
            )
            surf.append(centers[vis] + offs)
        cloud = extr_inv.apply(pose.apply(np.vstack(surf)))
        if spec.point_sigma > 0:
            cloud = cloud + s_rng.normal(0.0, spec.point_sigma, cloud.shape)
        if spec.outlier_fraction > 0:
            o_rng = np.random.default_rng([seed, 15013, i])
            n_bad = int(round(spec.outlier_fraction * cloud.shape[0]))
            bad = o_rng.choice(cloud.shape[0], size=n_bad, replace=False)
            lo, hi = cloud.min(axis=0), cloud.max(axis=0)
            cloud = cloud.copy()
            cloud[bad] = o_rng.uniform(lo, hi, size=(n_bad, 3))

        lm_ok = ok[landmark_ids]
        lids = landmark_ids[lm_ok]
        table = np.column_stack([lids, u[lids], v[lids]])
        buffers = render(gmap, pose, intr)
        frames.append(Frame(i, stamp, buffers.color, cloud, table))
    return world, frames


def persist_world(world, frames, out_dir):
    """Write a generated world as a dataset the loaders understand.

    Layout: rgb/NNNNNN.png, cloud/NNNNNN.ply, features/NNNNNN.txt,
    calib.txt (intrinsics + extrinsic), groundtruth.txt, gt_map.bin.
    """
    for sub in ("rgb", "cloud", "features"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for fr in frames:
        stem = f"{fr.index:06d}"
        save_image(os.path.join(out_dir, "rgb", f"{stem}.png"), fr.image)
        save_ply(os.path.join(out_dir, "cloud", f"{stem}.ply"), fr.cloud)
        save_feature_table(os.path.join(out_dir, "features", f"{stem}.txt"), fr.features)
    write_calibration(os.path.join(out_dir, "calib.txt"), world.intrinsics, world.gt_extrinsic)
    write_trajectory(world.gt_trajectory, os.path.join(out_dir, "groundtruth.txt"))
    save_map(world.map(), os.path.join(out_dir, "gt_map.bin"))
    return out_dir
