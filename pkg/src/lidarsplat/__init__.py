"""LiDAR-camera trajectory estimation and isotropic Gaussian splat mapping."""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose, exp_se3, log_se3, project_point

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "exp_se3",
    "log_se3",
    "project_point",
    "__version__",
]
