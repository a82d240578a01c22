"""SE(3) poses, twists, and the pinhole camera model.

Conventions used throughout the package:

* ``Pose`` stores a rotation matrix and a translation vector and maps
  points from its source frame into its target frame, ``y = R x + t``.
  Frame poses ``T_i`` map WORLD -> CAMERA-i, so the relative motion
  ``T_ij = T_i T_j^-1`` maps camera-j coordinates into camera-i.
  The extrinsic ``T_e`` maps LIDAR -> CAMERA.
* A twist is a plain ``(6,)`` float array ``(wx, wy, wz, vx, vy, vz)``:
  rotational part first (radians), translational part second (meters).
* Rotations are kept as matrices everywhere; quaternions appear only at
  trajectory-file boundaries (see ``ingest``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPiError, BehindCameraError

# Below this rotation angle the exponential/logarithm switch to their
# Taylor expansions.
SMALL_ANGLE = 1e-8


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``apply(x) = rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(r) < 0.0:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3g})")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one ``(3,)`` point or an ``(N, 3)`` array of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame."""
        return -self.rotation.T @ self.translation


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle of a 3x3 rotation matrix, in [0, pi].

    atan2 of the antisymmetric part against the trace; well conditioned
    near zero where arccos of the trace loses half the digits.
    """
    axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = np.linalg.norm(axis)
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle, translation distance) between two poses."""
    d = a @ b.inverse()
    return rotation_angle(d.rotation), float(np.linalg.norm(d.translation))


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; exact Taylor branch below SMALL_ANGLE."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def _rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), Shepperd's method.

    Stable for all angles including near pi, where the trace-based
    extraction of the axis loses precision.
    """
    tr = np.trace(r)
    candidates = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
    case = int(np.argmax(candidates))
    if case == 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif case == 1:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif case == 2:
        s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector. Raises near angle pi.

    Goes through a quaternion so the axis stays accurate for large
    angles; callers that may hit the pi edge must catch
    AngleNearPiError and reject the measurement.
    """
    q = _rotmat_to_quat(np.asarray(r, dtype=float))
    w = abs(q[0])
    vec = q[1:] if q[0] >= 0.0 else -q[1:]
    n = np.linalg.norm(vec)
    theta = 2.0 * np.arctan2(n, w)
    if theta > np.pi - 1e-6:
        raise AngleNearPiError(f"rotation angle {theta:.9f} within 1e-6 of pi")
    if n < SMALL_ANGLE:
        # theta ~ 2n here; vec/n * theta ~ 2*vec * (1 + n^2/(6 w^2))
        return 2.0 * vec / w * (1.0 - n**2 / (3.0 * w**2))
    return vec / n * theta


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * k + b * (k @ k)


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def exp_se3(twist: np.ndarray) -> Pose:
    """Twist (wx, wy, wz, vx, vy, vz) -> Pose. Zero twist -> identity."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(exp_so3(w), _left_jacobian(w) @ v)


def log_se3(pose: Pose) -> np.ndarray:
    """Pose -> twist, inverse of exp_se3. Raises AngleNearPiError."""
    w = log_so3(pose.rotation)
    v = _left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (u, v) = (fx x/z + cx, fy y/z + cy)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


def project_point(k: CameraIntrinsics, x_cam: np.ndarray) -> tuple[np.ndarray, float]:
    """Project one camera-frame point; raises BehindCameraError for z <= 1e-9."""
    x_cam = np.asarray(x_cam, dtype=float)
    z = x_cam[2]
    if z <= 1e-9:
        raise BehindCameraError(f"depth {z:.3g} <= 1e-9")
    pixel = np.array([k.fx * x_cam[0] / z + k.cx, k.fy * x_cam[1] / z + k.cy])
    return pixel, float(z)


def project_points(k: CameraIntrinsics, pts_cam: np.ndarray, min_depth: float = 1e-9):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (pixels (N, 2), depths (N,), valid (N,)) where invalid rows
    (depth <= min_depth) hold garbage and must be masked by the caller.
    """
    pts_cam = np.asarray(pts_cam, dtype=float).reshape(-1, 3)
    z = pts_cam[:, 2]
    valid = z > min_depth
    zz = np.where(valid, z, 1.0)
    u = k.fx * pts_cam[:, 0] / zz + k.cx
    v = k.fy * pts_cam[:, 1] / zz + k.cy
    return np.stack([u, v], axis=1), z, valid


def unproject_pixel(k: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Pixel + depth -> camera-frame point on the viewing ray."""
    u, v = pixel
    return np.array([depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth])
