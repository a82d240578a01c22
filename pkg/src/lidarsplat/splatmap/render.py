"""Tiled forward and backward rasterization of isotropic gaussian splats.

Pixel (row v, column u) has its center at continuous image coordinates
(u, v); all buffers are indexed ``[v, u]``.  Splats are composited front
to back in order of increasing camera depth; depth ties are broken by
the world position (lexicographic), so the output never depends on the
storage order of the map.

The footprint of a splat at camera depth d is a 2D gaussian of standard
deviation r' = f*r/d pixels with f = (fx+fy)/2.  Its weight at a pixel,

    alpha = o * exp(-rho^2 / (2 r'^2)),    rho = |center - pixel|,

is cut to zero beyond 3 r' or below 1/255, and clamped to 0.999 so the
accumulated transmittance never reaches zero.  ``literal_eq8`` switches
the denominator to 2 r' (a published variant that is dimensionally odd;
kept only for comparison).
"""

from functools import lru_cache

import numpy as np

from .types import ProjectedGaussian, RenderBuffers

TILE_SIZE = 8
NEAR_CLIP = 0.01
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
SUPPORT_SIGMAS = 3.0


def project_gaussian(gaussian, pose, intrinsics, index=0):
    """Project one splat; returns None when culled (behind the near plane
    or its 3-sigma disc entirely off the image)."""
    cam = pose.apply(gaussian.position)
    d = float(cam[2])
    if d <= NEAR_CLIP:
        return None
    u = intrinsics.fx * cam[0] / d + intrinsics.cx
    v = intrinsics.fy * cam[1] / d + intrinsics.cy
    rpix = intrinsics.mean_focal * gaussian.radius / d
    m = SUPPORT_SIGMAS * rpix
    if (
        u + m < 0.0
        or u - m > intrinsics.width - 1.0
        or v + m < 0.0
        or v - m > intrinsics.height - 1.0
    ):
        return None
    return ProjectedGaussian(np.array([u, v]), rpix, d, index)


def alpha_at(projected, opacity, pixel, literal_eq8=False):
    """Compositing weight of a projected splat at one pixel."""
    dy = np.asarray(pixel, dtype=float) - projected.center
    rho2 = float(dy @ dy)
    if rho2 > (SUPPORT_SIGMAS * projected.radius) ** 2:
        return 0.0
    denom = 2.0 * projected.radius if literal_eq8 else 2.0 * projected.radius**2
    a = opacity * np.exp(-rho2 / denom)
    if a < ALPHA_MIN:
        return 0.0
    return min(float(a), ALPHA_MAX)


def _prepare(gmap, pose, intrinsics, disc_cull=True):
    """Cull, project and depth-sort the map for one view.

    Returns a dict of per-splat arrays in composite order plus ``index``
    (position of each kept splat in the original map) for gradient
    scatter.
    """
    mu = np.asarray(gmap.positions, dtype=float).reshape(-1, 3)
    index = np.arange(mu.shape[0])
    cam = pose.apply(mu) if mu.shape[0] else np.zeros((0, 3))
    z = cam[:, 2]
    keep = z > NEAR_CLIP
    index, cam, z = index[keep], cam[keep], z[keep]
    u = intrinsics.fx * cam[:, 0] / np.where(z > 0, z, 1.0) + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / np.where(z > 0, z, 1.0) + intrinsics.cy
    radii = np.asarray(gmap.radii, dtype=float)[index]
    rpix = intrinsics.mean_focal * radii / z if z.size else np.zeros(0)
    if disc_cull and index.size:
        m = SUPPORT_SIGMAS * rpix
        inside = (
            (u + m >= 0.0)
            & (u - m <= intrinsics.width - 1.0)
            & (v + m >= 0.0)
            & (v - m <= intrinsics.height - 1.0)
        )
        index, cam, z = index[inside], cam[inside], z[inside]
        u, v, rpix, radii = u[inside], v[inside], rpix[inside], radii[inside]
    mu_kept = mu[index]
    order = np.lexsort((mu_kept[:, 2], mu_kept[:, 1], mu_kept[:, 0], z))
    index, cam, z = index[order], cam[order], z[order]
    u, v, rpix, radii = u[order], v[order], rpix[order], radii[order]
    return {
        "index": index,
        "cam": cam,
        "z": z,
        "u": u,
        "v": v,
        "rpix": rpix,
        "radius": radii,
        "opacity": np.asarray(gmap.opacities, dtype=float)[index],
        "color": np.asarray(gmap.colors, dtype=float).reshape(-1, 3)[index],
    }


def _tile_bins(u, v, rpix, width, height):
    """Map each splat to the tiles its 3-sigma disc can touch."""
    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    m = SUPPORT_SIGMAS * rpix
    tx0 = np.clip(np.floor((u - m) / TILE_SIZE).astype(int), 0, ntx - 1)
    tx1 = np.clip(np.floor((u + m) / TILE_SIZE).astype(int), 0, ntx - 1)
    ty0 = np.clip(np.floor((v - m) / TILE_SIZE).astype(int), 0, nty - 1)
    ty1 = np.clip(np.floor((v + m) / TILE_SIZE).astype(int), 0, nty - 1)
    bins = {}
    for i in range(u.size):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                bins.setdefault((ty, tx), []).append(i)
    return bins, ntx, nty


@lru_cache(maxsize=512)
def _tile_pixels(ty, tx, width, height):
    x0 = tx * TILE_SIZE
    y0 = ty * TILE_SIZE
    x1 = min(x0 + TILE_SIZE, width)
    y1 = min(y0 + TILE_SIZE, height)
    px, py = np.meshgrid(np.arange(x0, x1, dtype=float), np.arange(y0, y1, dtype=float))
    return x0, x1, y0, y1, px.ravel(), py.ravel()


def _alpha_block(u, v, rpix, opacity, px, py, literal_eq8):
    """(K, P) weights plus the pieces the backward pass reuses."""
    du = u[:, None] - px[None, :]
    dv = v[:, None] - py[None, :]
    rho2 = du * du + dv * dv
    denom = 2.0 * rpix if literal_eq8 else 2.0 * rpix * rpix
    g = np.exp(-rho2 / denom[:, None])
    a = opacity[:, None] * g
    dead = (rho2 > (SUPPORT_SIGMAS * rpix[:, None]) ** 2) | (a < ALPHA_MIN)
    a = np.where(dead, 0.0, a)
    clamped = a > ALPHA_MAX
    a = np.where(clamped, ALPHA_MAX, a)
    # active = weight still responds to the parameters
    return a, g, du, dv, rho2, ~(dead | clamped)


def render(gmap, pose, intrinsics, background=(0.0, 0.0, 0.0), literal_eq8=False):
    """Composite the map into color/depth/silhouette buffers."""
    h, w = intrinsics.height, intrinsics.width
    bg = np.asarray(background, dtype=float).reshape(3)
    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    sil = np.zeros((h, w))
    pr = _prepare(gmap, pose, intrinsics)
    if pr["index"].size == 0:
        return RenderBuffers(color, depth, sil)
    bins, _, _ = _tile_bins(pr["u"], pr["v"], pr["rpix"], w, h)
    for key in sorted(bins):
        rows = np.asarray(bins[key], dtype=int)
        x0, x1, y0, y1, px, py = _tile_pixels(*key, w, h)
        a, _, _, _, _, _ = _alpha_block(
            pr["u"][rows], pr["v"][rows], pr["rpix"][rows], pr["opacity"][rows], px, py, literal_eq8
        )
        trans = np.cumprod(1.0 - a, axis=0)
        t_before = np.vstack([np.ones((1, a.shape[1])), trans[:-1]])
        wgt = a * t_before
        shape = (y1 - y0, x1 - x0)
        sil[y0:y1, x0:x1] = wgt.sum(axis=0).reshape(shape)
        depth[y0:y1, x0:x1] = (wgt * pr["z"][rows, None]).sum(axis=0).reshape(shape)
        ctile = wgt.T @ pr["color"][rows] + trans[-1][:, None] * bg
        color[y0:y1, x0:x1] = ctile.reshape(shape + (3,))
    return RenderBuffers(color, depth, sil)


def render_brute(gmap, pose, intrinsics, background=(0.0, 0.0, 0.0), literal_eq8=False):
    """Per-pixel compositing over every projected splat, no spatial culling.

    Reference implementation used to validate the tiled path.
    """
    h, w = intrinsics.height, intrinsics.width
    bg = np.asarray(background, dtype=float).reshape(3)
    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    sil = np.zeros((h, w))
    pr = _prepare(gmap, pose, intrinsics, disc_cull=False)
    if pr["index"].size == 0:
        return RenderBuffers(color, depth, sil)
    denom = 2.0 * pr["rpix"] if literal_eq8 else 2.0 * pr["rpix"] ** 2
    lim = (SUPPORT_SIGMAS * pr["rpix"]) ** 2
    for row in range(h):
        for col in range(w):
            rho2 = (pr["u"] - col) ** 2 + (pr["v"] - row) ** 2
            a = pr["opacity"] * np.exp(-rho2 / denom)
            a[(rho2 > lim) | (a < ALPHA_MIN)] = 0.0
            a = np.minimum(a, ALPHA_MAX)
            t_before = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
            wgt = a * t_before
            sil[row, col] = wgt.sum()
            depth[row, col] = wgt @ pr["z"]
            color[row, col] = wgt @ pr["color"] + np.prod(1.0 - a) * bg
    return RenderBuffers(color, depth, sil)


def render_pair(gmap, pose, intrinsics, background=(0.0, 0.0, 0.0), literal_eq8=False):
    """Forward render plus a closure computing the backward pass.

    The closure reuses the projection, tile binning and per-tile
    compositing intermediates from the forward pass, so one loss
    evaluation with gradients costs about one pass instead of two.
    Returns (RenderBuffers, backward(grad_color, grad_depth,
    grad_silhouette) -> (d_mu, d_color, d_opacity, d_radius)).
    """
    h, w = intrinsics.height, intrinsics.width
    bg = np.asarray(background, dtype=float).reshape(3)
    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    sil = np.zeros((h, w))
    pr = _prepare(gmap, pose, intrinsics)
    n = len(gmap)
    tiles = []
    if pr["index"].size:
        bins, _, _ = _tile_bins(pr["u"], pr["v"], pr["rpix"], w, h)
        for key in sorted(bins):
            rows = np.asarray(bins[key], dtype=int)
            x0, x1, y0, y1, px, py = _tile_pixels(*key, w, h)
            a, g, du, dv, rho2, active = _alpha_block(
                pr["u"][rows], pr["v"][rows], pr["rpix"][rows],
                pr["opacity"][rows], px, py, literal_eq8,
            )
            trans = np.cumprod(1.0 - a, axis=0)
            t_before = np.vstack([np.ones((1, a.shape[1])), trans[:-1]])
            wgt = a * t_before
            shape = (y1 - y0, x1 - x0)
            sil[y0:y1, x0:x1] = wgt.sum(axis=0).reshape(shape)
            depth[y0:y1, x0:x1] = (wgt * pr["z"][rows, None]).sum(axis=0).reshape(shape)
            ctile = wgt.T @ pr["color"][rows] + trans[-1][:, None] * bg
            color[y0:y1, x0:x1] = ctile.reshape(shape + (3,))
            tiles.append(
                (rows, x0, x1, y0, y1, a, g, du, dv, rho2, active, trans, t_before, wgt)
            )
    buffers = RenderBuffers(color, depth, sil)

    def backward(grad_color, grad_depth, grad_silhouette):
        g_mu = np.zeros((n, 3))
        g_col = np.zeros((n, 3))
        g_opa = np.zeros(n)
        g_rad = np.zeros(n)
        m = pr["index"].size
        if m == 0:
            return g_mu, g_col, g_opa, g_rad
        gc_buf = np.asarray(grad_color, dtype=float).reshape(h, w, 3)
        gd_buf = np.asarray(grad_depth, dtype=float).reshape(h, w)
        gs_buf = np.asarray(grad_silhouette, dtype=float).reshape(h, w)

        # accumulators over the sorted visible set
        acc_u = np.zeros(m)
        acc_v = np.zeros(m)
        acc_rp = np.zeros(m)
        acc_d = np.zeros(m)
        acc_o = np.zeros(m)
        acc_c = np.zeros((m, 3))

        for rows, x0, x1, y0, y1, a, g, du, dv, rho2, active, trans, t_before, wgt in tiles:
            rp = pr["rpix"][rows]
            opa = pr["opacity"][rows]
            col = pr["color"][rows]
            dep = pr["z"][rows]

            gc = gc_buf[y0:y1, x0:x1].reshape(-1, 3)
            gd = gd_buf[y0:y1, x0:x1].ravel()
            gs = gs_buf[y0:y1, x0:x1].ravel()

            # suffix sums: contribution of everything behind splat k.  The
            # color channel contracts with its upstream gradient before the
            # cumulative sums, so no (K, P, 3) temporaries are built.
            cgp = col @ gc.T
            sc = wgt * cgp
            tot_cg = sc.sum(axis=0) + trans[-1] * (gc @ bg)
            after_cg = tot_cg[None, :] - np.cumsum(sc, axis=0)
            wd = wgt * dep[:, None]
            after_d = wd.sum(axis=0)[None, :] - np.cumsum(wd, axis=0)
            after_s = wgt.sum(axis=0)[None, :] - np.cumsum(wgt, axis=0)

            inv = 1.0 / (1.0 - a)
            d_alpha = (
                t_before * cgp - after_cg * inv
                + gd[None, :] * (t_before * dep[:, None] - after_d * inv)
                + gs[None, :] * (t_before - after_s * inv)
            )
            d_alpha = np.where(active, d_alpha, 0.0)

            acc_c_tile = wgt @ gc
            acc_d_tile = (wgt * gd[None, :]).sum(axis=1)

            dg = d_alpha * opa[:, None]  # upstream into the footprint gaussian
            common = dg * g
            if literal_eq8:
                gu_tile = (common * (-du) / rp[:, None]).sum(axis=1)
                gv_tile = (common * (-dv) / rp[:, None]).sum(axis=1)
                grp_tile = (common * rho2 / (2.0 * rp * rp)[:, None]).sum(axis=1)
            else:
                rp2 = (rp * rp)[:, None]
                gu_tile = (common * (-du) / rp2).sum(axis=1)
                gv_tile = (common * (-dv) / rp2).sum(axis=1)
                grp_tile = (common * rho2 / (rp ** 3)[:, None]).sum(axis=1)
            go_tile = (d_alpha * g).sum(axis=1)

            # each splat appears at most once per tile, so plain fancy
            # indexing accumulates correctly
            acc_u[rows] += gu_tile
            acc_v[rows] += gv_tile
            acc_rp[rows] += grp_tile
            acc_d[rows] += acc_d_tile
            acc_o[rows] += go_tile
            acc_c[rows] += acc_c_tile

        # chain through projection: u = fx x/z + cx, v = fy y/z + cy,
        # r' = f r / z, depth buffer value = z
        z = pr["z"]
        x = pr["cam"][:, 0]
        y = pr["cam"][:, 1]
        f = intrinsics.mean_focal
        gz_total = acc_d + acc_rp * (-f * pr["radius"] / (z * z))
        gx = acc_u * intrinsics.fx / z
        gy = acc_v * intrinsics.fy / z
        gz = (
            -acc_u * intrinsics.fx * x / (z * z)
            - acc_v * intrinsics.fy * y / (z * z)
            + gz_total
        )
        gcam = np.stack([gx, gy, gz], axis=1)
        g_mu[pr["index"]] = gcam @ pose.rotation
        g_col[pr["index"]] = acc_c
        g_opa[pr["index"]] = acc_o
        g_rad[pr["index"]] = acc_rp * f / z
        return g_mu, g_col, g_opa, g_rad

    return buffers, backward


def render_backward(
    gmap,
    pose,
    intrinsics,
    grad_color,
    grad_depth,
    grad_silhouette,
    background=(0.0, 0.0, 0.0),
    literal_eq8=False,
):
    """Gradients of the rendered buffers w.r.t. every splat parameter.

    Runs the forward pass tile by tile and pulls the upstream buffer
    gradients back through compositing, the footprint gaussian and the
    projection.  Splats culled in the forward pass get zeros.  Returns
    (d_position (N,3), d_color (N,3), d_opacity (N,), d_radius (N,)).
    """
    _, backward = render_pair(gmap, pose, intrinsics, background, literal_eq8)
    return backward(grad_color, grad_depth, grad_silhouette)
