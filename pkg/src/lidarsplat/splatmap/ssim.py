"""Structural similarity with an analytic gradient.

Local statistics use an 11x11 gaussian window (sigma 1.5) applied as a
zero-padded separable correlation; on [0,1] images the stabilizers are
C1 = 0.01^2 and C2 = 0.03^2.  Zero padding keeps the window operator
self-adjoint, which makes the gradient a plain re-filtering of the
per-pixel terms, and ssim(x, x) is still exactly 1 because shrunken
border means cancel in ratio form.
"""

import numpy as np
from scipy.ndimage import correlate1d

from ..errors import DimensionMismatchError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _window():
    x = np.arange(WINDOW_SIZE, dtype=float) - (WINDOW_SIZE - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * WINDOW_SIGMA ** 2))
    return g / g.sum()


_KERNEL = _window()


def _smooth(img):
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def ssim(a, b):
    """Mean local structural similarity of ``a`` against reference ``b``.

    Accepts (H, W) or (H, W, C) images in [0, 1]; channels are averaged.
    Returns (score, d score / d a).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise DimensionMismatchError(f"expected 2D or 3D image, got shape {a.shape}")

    grad = np.zeros_like(a)
    total = 0.0
    scale = 1.0 / a.size
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _smooth(x)
        mu_y = _smooth(y)
        x2 = _smooth(x * x)
        y2 = _smooth(y * y)
        xy = _smooth(x * y)
        var_x = x2 - mu_x * mu_x
        var_y = y2 - mu_y * mu_y
        cov = xy - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + C1
        a2 = 2.0 * cov + C2
        b1 = mu_x * mu_x + mu_y * mu_y + C1
        b2 = var_x + var_y + C2
        smap = (a1 * a2) / (b1 * b2)
        total += smap.sum() * scale

        # pixelwise partials of smap w.r.t. the five filtered fields
        g_a1 = a2 / (b1 * b2)
        g_a2 = a1 / (b1 * b2)
        g_b1 = -smap / b1
        g_b2 = -smap / b2
        g_mu_x = 2.0 * mu_y * g_a1 + 2.0 * mu_x * g_b1 - 2.0 * mu_x * g_b2 - 2.0 * mu_y * g_a2
        g_x2 = g_b2
        g_xy = 2.0 * g_a2
        # adjoint of the (self-adjoint) window operator
        grad[:, :, ch] = scale * (
            _smooth(g_mu_x) + 2.0 * x * _smooth(g_x2) + y * _smooth(g_xy)
        )
    if squeeze:
        grad = grad[:, :, 0]
    return float(total), grad
