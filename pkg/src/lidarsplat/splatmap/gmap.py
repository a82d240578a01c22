"""Growable splat collection with per-parameter optimizer state.

Opacity is stored as a logit and radius as a log so gradient steps can
never leave the feasible set; the public ``opacities``/``radii`` views
are the constrained values.  Optimizer state (first/second moments and
a per-splat step count for bias correction, since splats join the map
at different times) is resized in lockstep with the collection.
"""

import os
import struct

import numpy as np
from scipy.special import expit, logit

from .types import Gaussian

MAP_FORMAT_VERSION = 1
MIN_RADIUS = 1e-4
_OPACITY_EPS = 1e-7
_RECORD = np.dtype(
    [("mu", "<f8", 3), ("color", "<f4", 3), ("opacity", "<f4"), ("radius", "<f4")]
)

_PARAM_SHAPES = {"mu": 3, "color": 3, "opacity": 1, "radius": 1}


class GaussianMap:
    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.colors = np.zeros((0, 3))
        self.opacity_logit = np.zeros(0)
        self.radius_log = np.zeros(0)
        self.moment1 = {k: _empty(d) for k, d in _PARAM_SHAPES.items()}
        self.moment2 = {k: _empty(d) for k, d in _PARAM_SHAPES.items()}
        self.steps = np.zeros(0, dtype=np.int64)
        self.keyframes = []
        self.scene_scale = None

    def __len__(self):
        return self.positions.shape[0]

    @property
    def opacities(self):
        return expit(self.opacity_logit)

    @property
    def radii(self):
        return np.exp(self.radius_log)

    @classmethod
    def from_arrays(cls, positions, colors, opacities, radii):
        gmap = cls()
        gmap.add_arrays(positions, colors, opacities, radii)
        return gmap

    def add_arrays(self, positions, colors, opacities, radii):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = positions.shape[0]
        colors = np.asarray(colors, dtype=float).reshape(n, 3)
        opacities = np.clip(np.asarray(opacities, dtype=float).reshape(n), _OPACITY_EPS, 1.0 - _OPACITY_EPS)
        radii = np.maximum(np.asarray(radii, dtype=float).reshape(n), MIN_RADIUS)
        self.positions = np.concatenate([self.positions, positions])
        self.colors = np.concatenate([self.colors, np.clip(colors, 0.0, 1.0)])
        self.opacity_logit = np.concatenate([self.opacity_logit, logit(opacities)])
        self.radius_log = np.concatenate([self.radius_log, np.log(radii)])
        for key, dim in _PARAM_SHAPES.items():
            pad = _empty(dim, n)
            self.moment1[key] = np.concatenate([self.moment1[key], pad])
            self.moment2[key] = np.concatenate([self.moment2[key], pad.copy()])
        self.steps = np.concatenate([self.steps, np.zeros(n, dtype=np.int64)])
        return n

    def add_gaussians(self, gaussians):
        if not gaussians:
            return 0
        return self.add_arrays(
            [g.position for g in gaussians],
            [g.color for g in gaussians],
            [g.opacity for g in gaussians],
            [g.radius for g in gaussians],
        )

    def as_gaussians(self):
        o = self.opacities
        r = self.radii
        return [
            Gaussian(self.positions[i], self.colors[i], o[i], r[i])
            for i in range(len(self))
        ]

    def prune(self, keep):
        """Drop splats where ``keep`` is False; returns the removed count."""
        keep = np.asarray(keep, dtype=bool).reshape(len(self))
        removed = int((~keep).sum())
        if removed == 0:
            return 0
        self.positions = self.positions[keep]
        self.colors = self.colors[keep]
        self.opacity_logit = self.opacity_logit[keep]
        self.radius_log = self.radius_log[keep]
        for key in _PARAM_SHAPES:
            self.moment1[key] = self.moment1[key][keep]
            self.moment2[key] = self.moment2[key][keep]
        self.steps = self.steps[keep]
        return removed

    def adam_step(self, grads, learning_rates, beta1=0.9, beta2=0.999, eps=1e-8):
        """One moment-based update from rendered-parameter gradients.

        ``grads`` is (d_mu, d_color, d_opacity, d_radius) as produced by
        the backward pass; opacity/radius gradients are chained through
        their reparameterizations here.  Color is clamped to [0, 1] and
        the radius floored after the step.
        """
        d_mu, d_col, d_opa, d_rad = grads
        o = self.opacities
        r = self.radii
        chained = {
            "mu": np.asarray(d_mu, dtype=float).reshape(len(self), 3),
            "color": np.asarray(d_col, dtype=float).reshape(len(self), 3),
            "opacity": np.asarray(d_opa, dtype=float).reshape(len(self)) * o * (1.0 - o),
            "radius": np.asarray(d_rad, dtype=float).reshape(len(self)) * r,
        }
        self.steps += 1
        t = self.steps.astype(float)
        for key, grad in chained.items():
            m = self.moment1[key]
            v = self.moment2[key]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            c1 = 1.0 - beta1 ** t
            c2 = 1.0 - beta2 ** t
            if grad.ndim == 2:
                c1 = c1[:, None]
                c2 = c2[:, None]
            update = learning_rates[key] * (m / c1) / (np.sqrt(v / c2) + eps)
            target = {
                "mu": self.positions,
                "color": self.colors,
                "opacity": self.opacity_logit,
                "radius": self.radius_log,
            }[key]
            target -= update
        np.clip(self.colors, 0.0, 1.0, out=self.colors)
        np.maximum(self.radius_log, np.log(MIN_RADIUS), out=self.radius_log)


def _empty(dim, n=0):
    return np.zeros((n, dim)) if dim > 1 else np.zeros(n)


def save_map(gmap, path):
    """Write the checkpoint: little-endian (count u64, version u32) header
    followed by one record per splat (mu 3xf64, color 3xf32, o f32, r f32)."""
    records = np.empty(len(gmap), dtype=_RECORD)
    records["mu"] = gmap.positions
    records["color"] = gmap.colors
    records["opacity"] = gmap.opacities
    records["radius"] = gmap.radii
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<QI", len(gmap), MAP_FORMAT_VERSION))
        fh.write(records.tobytes())
    os.replace(tmp, path)


def load_map(path):
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError(f"truncated map header in {path}")
        count, version = struct.unpack("<QI", header)
        if version != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map format version {version}")
        records = np.frombuffer(fh.read(), dtype=_RECORD)
    if records.shape[0] != count:
        raise ValueError(
            f"map {path} declares {count} splats but stores {records.shape[0]}"
        )
    mu = records["mu"].astype(float).reshape(-1, 3)
    color = records["color"].astype(float).reshape(-1, 3)
    opacity = records["opacity"].astype(float)
    radius = records["radius"].astype(float)
    if not (
        np.isfinite(mu).all()
        and np.isfinite(color).all()
        and np.isfinite(opacity).all()
        and np.isfinite(radius).all()
    ):
        raise ValueError(f"map {path} holds non-finite values")
    if (opacity < 0).any() or (opacity > 1).any():
        raise ValueError(f"map {path} holds opacities outside [0, 1]")
    if (radius <= 0).any():
        raise ValueError(f"map {path} holds non-positive radii")
    if (color < 0).any() or (color > 1).any():
        raise ValueError(f"map {path} holds colors outside [0, 1]")
    return GaussianMap.from_arrays(mu, color, opacity, radius)
