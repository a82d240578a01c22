"""Dataset loading and serialization of images, clouds and trajectories.

Two dataset layouts are supported:

* RGB-D index layout: ``rgb.txt``/``depth.txt`` (whitespace rows of
  "timestamp path"), optional ``groundtruth.txt``; depth PNGs are 16-bit
  with value/5000 = meters and are unprojected into per-frame clouds.
* Generic paired layout: ``rgb/NNNNNN.png`` + ``cloud/NNNNNN.ply`` +
  ``calib.txt`` (intrinsics and the initial LiDAR-to-camera transform),
  optional ``groundtruth.txt`` and per-frame ``features/NNNNNN.txt``
  observation tables ("landmark_id u v" rows).

Trajectory files follow the usual text convention: one line per pose,
"timestamp tx ty tz qx qy qz qw", storing camera-to-world; the in-memory
convention everywhere else is world-to-camera, so writers invert poses
on the way out and readers invert them back on the way in.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import MissingIndexFileError
from .geometry import CameraIntrinsics, Pose

TUM_DEPTH_SCALE = 5000.0
ASSOCIATION_TOLERANCE = 0.02


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray
    cloud: np.ndarray
    features: np.ndarray = None  # optional (M, 3) rows of (landmark id, u, v)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.cloud = np.asarray(self.cloud, dtype=float).reshape(-1, 3)


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray = None
    normal_valid: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape[0] != self.points.shape[0]:
                raise ValueError("normals and points must align")
            if self.normal_valid is None:
                self.normal_valid = np.ones(self.points.shape[0], dtype=bool)
            norms = np.linalg.norm(self.normals[self.normal_valid], axis=1)
            if norms.size and np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("valid normals must be unit length")


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("depth and mask shapes differ")
        valid = self.values[self.mask]
        if valid.size and (not np.isfinite(valid).all() or (valid <= 0).any()):
            raise ValueError("masked depth entries must be finite and positive")
        if np.any(self.values[~self.mask] != 0.0):
            raise ValueError("unmasked depth entries must be exactly 0")


def load_image(path):
    """8-bit RGB PNG -> (H, W, 3) floats in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.astype(float) / 255.0


def save_image(path, image):
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    _atomic_pil_save(Image.fromarray(data, mode="RGB"), path)


def load_depth_png(path, scale=TUM_DEPTH_SCALE):
    """16-bit depth PNG -> DepthMap in meters; zero pixels are invalid."""
    with Image.open(path) as img:
        raw = np.asarray(img, dtype=np.float64)
    mask = raw > 0
    return DepthMap(np.where(mask, raw / scale, 0.0), mask)


def save_depth_png(path, depth, scale=TUM_DEPTH_SCALE):
    data = np.clip(np.rint(np.asarray(depth, dtype=float) * scale), 0, 65535)
    _atomic_pil_save(Image.fromarray(data.astype(np.uint16)), path)


def _atomic_pil_save(img, path):
    tmp = f"{path}.tmp"
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def depth_to_cloud(depth_map, intrinsics, pixel_stride=1):
    """Unproject valid depth pixels on a stride grid into camera-frame points."""
    h, w = depth_map.values.shape
    vv, uu = np.mgrid[0:h:pixel_stride, 0:w:pixel_stride]
    d = depth_map.values[vv, uu]
    m = depth_map.mask[vv, uu]
    u = uu[m].astype(float)
    v = vv[m].astype(float)
    z = d[m]
    pts = np.column_stack(
        [z * (u - intrinsics.cx) / intrinsics.fx, z * (v - intrinsics.cy) / intrinsics.fy, z]
    )
    return PointCloud(pts)


def _read_index_file(path):
    if not os.path.isfile(path):
        raise MissingIndexFileError(f"missing index file {path}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            rows.append((float(parts[0]), parts[1]))
    return rows


def _nearest_row(target, stamps):
    """Index of the nearest timestamp (stamps sorted ascending)."""
    pos = np.searchsorted(stamps, target)
    best = None
    for cand in (pos - 1, pos):
        if 0 <= cand < len(stamps):
            if best is None or abs(stamps[cand] - target) < abs(stamps[best] - target):
                best = cand
    return best


def load_tum_sequence(
    root,
    intrinsics,
    stride=1,
    max_frames=None,
    tolerance=ASSOCIATION_TOLERANCE,
    depth_scale=TUM_DEPTH_SCALE,
    pixel_stride=8,
):
    """Load an RGB-D index-file sequence.

    Associates rgb/depth/ground-truth rows by nearest timestamp within
    ``tolerance`` (unassociated rgb rows are dropped), subsamples by
    ``stride``, then caps at ``max_frames``.  Returns (frames,
    ground-truth trajectory or None).
    """
    rgb_rows = _read_index_file(os.path.join(root, "rgb.txt"))
    depth_rows = _read_index_file(os.path.join(root, "depth.txt"))
    depth_stamps = np.array([t for t, _ in depth_rows])
    gt = None
    gt_stamps = None
    gt_path = os.path.join(root, "groundtruth.txt")
    if os.path.isfile(gt_path):
        gt = read_trajectory(gt_path)
        gt_stamps = np.array([t for t, _ in gt])

    associated = []
    for t_rgb, rgb_rel in rgb_rows:
        di = _nearest_row(t_rgb, depth_stamps)
        if di is None or abs(depth_stamps[di] - t_rgb) > tolerance:
            continue
        associated.append((t_rgb, rgb_rel, depth_rows[di][1]))

    associated = associated[::stride]
    if max_frames is not None:
        associated = associated[:max_frames]

    frames = []
    gt_out = []
    for idx, (t_rgb, rgb_rel, depth_rel) in enumerate(associated):
        image = load_image(os.path.join(root, rgb_rel))
        dmap = load_depth_png(os.path.join(root, depth_rel), depth_scale)
        cloud = depth_to_cloud(dmap, intrinsics, pixel_stride)
        frames.append(Frame(idx, t_rgb, image, cloud.points))
        if gt is not None:
            gi = _nearest_row(t_rgb, gt_stamps)
            if gi is not None and abs(gt_stamps[gi] - t_rgb) <= tolerance:
                gt_out.append((t_rgb, gt[gi][1]))
    return frames, (gt_out if gt is not None else None)


def write_trajectory(trajectory, path):
    """Write world-to-camera poses as camera-to-world rows."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for t, pose in trajectory:
            inv = pose.inverse()
            q = Rotation.from_matrix(inv.rotation).as_quat()  # x, y, z, w
            nums = " ".join(f"{x:.9g}" for x in (*inv.translation, *q))
            fh.write(f"{t:.6f} {nums}\n")
    os.replace(tmp, path)


def read_trajectory(path):
    """Read camera-to-world rows back into world-to-camera poses."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            t, tx, ty, tz = vals[0], vals[1], vals[2], vals[3]
            rot = Rotation.from_quat(vals[4:8]).as_matrix()
            out.append((t, Pose(rot, [tx, ty, tz]).inverse()))
    return out


def save_ply(path, points, normals=None, binary=True):
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    has_n = normals is not None
    if has_n:
        normals = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {points.shape[0]}")
    header += ["property float x", "property float y", "property float z"]
    if has_n:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")
    data = np.hstack([points, normals]) if has_n else points
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.astype("<f4").tobytes())
        else:
            for row in data:
                fh.write((" ".join(f"{x:.9g}" for x in row) + "\n").encode("ascii"))
    os.replace(tmp, path)


def load_ply(path):
    """Read ascii or binary little-endian PLY with float32 x,y,z and
    optional nx,ny,nz properties."""
    with open(path, "rb") as fh:
        fmt = None
        count = None
        props = []
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end_header":
                break
            if not line:
                raise ValueError(f"unterminated PLY header in {path}")
            parts = line.split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element" and parts[1] == "vertex":
                count = int(parts[2])
            elif parts[0] == "property" and count is not None:
                if parts[1] != "float":
                    raise ValueError(f"unsupported PLY property type {parts[1]}")
                props.append(parts[2])
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"unsupported PLY format {fmt}")
        if count is None:
            raise ValueError(f"no vertex element in {path}")
        if fmt == "ascii":
            body = fh.read().decode("ascii").split()
            data = np.array([float(x) for x in body], dtype=float)
            data = data.reshape(count, len(props)) if count else np.zeros((0, len(props)))
        else:
            raw = fh.read(4 * len(props) * count)
            data = np.frombuffer(raw, dtype="<f4").reshape(count, len(props)).astype(float)
    cols = {name: data[:, i] for i, name in enumerate(props)}
    points = np.column_stack([cols["x"], cols["y"], cols["z"]]) if count else np.zeros((0, 3))
    normals = None
    if {"nx", "ny", "nz"} <= set(props):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.maximum(norms, 1e-30), 0.0)
    return PointCloud(points, normals)


def write_calibration(path, intrinsics, extrinsic):
    """calib.txt: intrinsics line then the LiDAR-to-camera transform."""
    q = Rotation.from_matrix(extrinsic.rotation).as_quat()
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("# fx fy cx cy width height\n")
        fh.write(
            f"{intrinsics.fx:.9g} {intrinsics.fy:.9g} {intrinsics.cx:.9g} "
            f"{intrinsics.cy:.9g} {intrinsics.width} {intrinsics.height}\n"
        )
        fh.write("# initial lidar-to-camera: tx ty tz qx qy qz qw\n")
        fh.write(" ".join(f"{x:.9g}" for x in (*extrinsic.translation, *q)) + "\n")
    os.replace(tmp, path)


def read_calibration(path):
    if not os.path.isfile(path):
        raise MissingIndexFileError(f"missing calibration file {path}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append([float(x) for x in line.split()])
    if len(rows) < 2:
        raise ValueError(f"calibration file {path} needs intrinsics and extrinsic rows")
    fx, fy, cx, cy, w, h = rows[0]
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
    tx, ty, tz, qx, qy, qz, qw = rows[1]
    extr = Pose(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), [tx, ty, tz])
    return intr, extr


def load_feature_table(path):
    """Observation table: rows of "landmark_id u v"."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                vals = line.split()
                rows.append((float(vals[0]), float(vals[1]), float(vals[2])))
    return np.array(rows, dtype=float).reshape(-1, 3)


def save_feature_table(path, table):
    table = np.asarray(table, dtype=float).reshape(-1, 3)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for lid, u, v in table:
            fh.write(f"{int(lid)} {u:.9g} {v:.9g}\n")
    os.replace(tmp, path)


def load_generic_sequence(root, stride=1, max_frames=None):
    """Load the paired image+cloud layout.

    Returns (frames, ground-truth trajectory or None, intrinsics,
    initial extrinsic).
    """
    rgb_dir = os.path.join(root, "rgb")
    cloud_dir = os.path.join(root, "cloud")
    if not os.path.isdir(rgb_dir):
        raise MissingIndexFileError(f"missing image directory {rgb_dir}")
    if not os.path.isdir(cloud_dir):
        raise MissingIndexFileError(f"missing cloud directory {cloud_dir}")
    intr, extr = read_calibration(os.path.join(root, "calib.txt"))
    names = sorted(n for n in os.listdir(rgb_dir) if n.endswith(".png"))
    names = names[::stride]
    if max_frames is not None:
        names = names[:max_frames]
    frames = []
    for idx, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        image = load_image(os.path.join(rgb_dir, name))
        cloud = load_ply(os.path.join(cloud_dir, f"{stem}.ply"))
        feat_path = os.path.join(root, "features", f"{stem}.txt")
        features = load_feature_table(feat_path) if os.path.isfile(feat_path) else None
        frames.append(Frame(idx, float(int(stem)), image, cloud.points, features))
    gt = None
    gt_path = os.path.join(root, "groundtruth.txt")
    if os.path.isfile(gt_path):
        stamps = {t: p for t, p in read_trajectory(gt_path)}
        gt = []
        for fr in frames:
            if fr.timestamp in stamps:
                gt.append((fr.timestamp, stamps[fr.timestamp]))
    return frames, gt, intr, extr
