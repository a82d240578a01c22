"""Value types for the isotropic splat map."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Gaussian:
    """One isotropic splat: world position, RGB color, opacity, radius."""

    position: np.ndarray
    color: np.ndarray
    opacity: float
    radius: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        self.opacity = float(self.opacity)
        self.radius = float(self.radius)

    def validate(self):
        if not (np.isfinite(self.position).all() and np.isfinite(self.color).all()):
            raise ValueError("non-finite gaussian parameters")
        if not np.isfinite(self.opacity) or not (0.0 <= self.opacity <= 1.0):
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if not np.isfinite(self.radius) or self.radius <= 0.0:
            raise ValueError(f"radius {self.radius} must be positive")
        if (self.color < 0.0).any() or (self.color > 1.0).any():
            raise ValueError("color outside [0, 1]")


@dataclass
class ProjectedGaussian:
    """Image-plane footprint of a splat: center (px), radius (px), depth (m)."""

    center: np.ndarray
    radius: float
    depth: float
    index: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.radius = float(self.radius)
        self.depth = float(self.depth)


@dataclass
class RenderBuffers:
    """Rendered color (H,W,3), depth (H,W, meters) and silhouette (H,W)."""

    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray

    @property
    def shape(self):
        return self.depth.shape
