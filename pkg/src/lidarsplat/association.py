"""Feature extraction, matching and observation association.

Covers the data-association layer: corner detection plus patch matching
between image pairs, lifting pixel features to LiDAR points, multi-view
triangulation, normal estimation on clouds, point-to-plane pairing, and
track assembly from pairwise matches.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    DegenerateBaselineError,
    NegativeDepthError,
    TooFewMatchesError,
)
from .ingest import PointCloud

PATCH_SIZE = 11
MIN_MATCHES = 8
LIFT_RADIUS = 2.0
MIN_PARALLAX_DEG = 1.0
PLANARITY_RATIO = 0.2


@dataclass
class FeatureMatch:
    frame_a: int
    frame_b: int
    pixel_a: np.ndarray
    pixel_b: np.ndarray
    lifted_a: np.ndarray = None  # matching LiDAR point in frame a, if found
    lifted_b: np.ndarray = None
    index_a: int = -1  # per-frame feature indices, used for track assembly
    index_b: int = -1
    score: float = 1.0


@dataclass
class MatchSet:
    """Pairwise matches as parallel arrays (indices are per-frame feature ids)."""

    index_a: np.ndarray
    index_b: np.ndarray
    pixels_a: np.ndarray
    pixels_b: np.ndarray

    def __len__(self):
        return self.index_a.shape[0]


@dataclass
class TrackedPoint:
    """A landmark observed in several frames; world position filled by refinement."""

    world_point: np.ndarray
    observations: list  # (frame_index, pixel (2,)) sorted by frame


@dataclass
class PointPlanePair:
    """Point-to-plane correspondence between two LiDAR frames."""

    source: np.ndarray  # point in the source LiDAR frame
    target: np.ndarray  # matched surface point in the target LiDAR frame
    normal: np.ndarray  # unit normal at the target point
    frame_i: int = -1
    frame_j: int = -1


def _grayscale(image):
    image = np.asarray(image, dtype=float)
    return image.mean(axis=2) if image.ndim == 3 else image


def detect_corners(image, max_corners=400, cell_size=16, quality=0.01, min_distance=3):
    """Minimum-eigenvalue corner detector with per-cell quotas.

    Returns (N, 2) pixel coordinates (u, v) sorted by response within a
    uniform grid so corners spread over the whole image.
    """
    gray = _grayscale(image)
    h, w = gray.shape
    gy, gx = np.gradient(gray)
    ixx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    half_tr = 0.5 * (ixx + iyy)
    response = half_tr - np.sqrt((0.5 * (ixx - iyy)) ** 2 + ixy**2)

    size = 2 * min_distance + 1
    peaks = response == ndimage.maximum_filter(response, size=size)
    margin = PATCH_SIZE // 2
    border = np.zeros_like(peaks)
    border[margin : h - margin, margin : w - margin] = True
    peaks &= border & (response > quality * max(response.max(), 1e-12))

    vs, us = np.nonzero(peaks)
    if vs.size == 0:
        return np.zeros((0, 2))
    resp = response[vs, us]
    order = np.lexsort((us, vs, -resp))
    vs, us, resp = vs[order], us[order], resp[order]

    n_cells_u = max(1, w // cell_size)
    n_cells_v = max(1, h // cell_size)
    quota = max(1, int(np.ceil(max_corners / (n_cells_u * n_cells_v))))
    counts = {}
    keep = []
    for i in range(vs.size):
        cell = (min(vs[i] // cell_size, n_cells_v - 1), min(us[i] // cell_size, n_cells_u - 1))
        if counts.get(cell, 0) < quota:
            counts[cell] = counts.get(cell, 0) + 1
            keep.append(i)
        if len(keep) >= max_corners:
            break
    keep = np.array(keep, dtype=int)
    return np.column_stack([us[keep], vs[keep]]).astype(float)


def _patches(gray, corners):
    """Zero-mean unit-norm patches; rows with no contrast are flagged."""
    half = PATCH_SIZE // 2
    n = corners.shape[0]
    out = np.zeros((n, PATCH_SIZE * PATCH_SIZE))
    ok = np.zeros(n, dtype=bool)
    for i, (u, v) in enumerate(corners.astype(int)):
        patch = gray[v - half : v + half + 1, u - half : u + half + 1]
        if patch.shape != (PATCH_SIZE, PATCH_SIZE):
            continue
        flat = patch.ravel() - patch.mean()
        norm = np.linalg.norm(flat)
        if norm < 1e-9:
            continue
        out[i] = flat / norm
        ok[i] = True
    return out, ok


def match_ncc(image_a, corners_a, image_b, corners_b, min_score=0.6, ratio=0.8):
    """Mutual-best normalized cross-correlation matching with a ratio test."""
    if corners_a.shape[0] == 0 or corners_b.shape[0] == 0:
        return []
    pa, ok_a = _patches(_grayscale(image_a), corners_a)
    pb, ok_b = _patches(_grayscale(image_b), corners_b)
    scores = pa @ pb.T
    scores[~ok_a] = -2.0
    scores[:, ~ok_b] = -2.0

    best_b = np.argmax(scores, axis=1)
    best_a = np.argmax(scores, axis=0)
    pairs = []
    for i in range(corners_a.shape[0]):
        j = best_b[i]
        s1 = scores[i, j]
        if not ok_a[i] or s1 < min_score or best_a[j] != i:
            continue
        if scores.shape[1] > 1:
            row = scores[i].copy()
            row[j] = -2.0
            s2 = row.max()
            if (1.0 - s1) > ratio * (1.0 - s2):
                continue
        pairs.append((i, int(j), float(s1)))
    return pairs


def detect_and_match(
    frame_a,
    frame_b,
    max_corners=400,
    min_score=0.6,
    ratio=0.8,
    min_matches=MIN_MATCHES,
):
    """Corner detection plus patch matching for one frame pair."""
    ca = detect_corners(frame_a.image, max_corners)
    cb = detect_corners(frame_b.image, max_corners)
    pairs = match_ncc(frame_a.image, ca, frame_b.image, cb, min_score, ratio)
    if len(pairs) < min_matches:
        raise TooFewMatchesError(
            f"only {len(pairs)} matches, need at least {min_matches}"
        )
    return [
        FeatureMatch(frame_a.index, frame_b.index, ca[i], cb[j],
                     index_a=i, index_b=j, score=s)
        for i, j, s in pairs
    ]


def lift_to_3d(pixels, cloud, intrinsics, extrinsic, lift_radius=LIFT_RADIUS):
    """Associate image pixels with LiDAR points via projection.

    Each cloud point is mapped into the camera with ``extrinsic`` and
    projected; a pixel adopts the nearest projection within
    ``lift_radius`` pixels.  Returns (points (M, 3) in the LiDAR frame,
    found (M,) bool); rows without a neighbour are zero.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    m = pixels.shape[0]
    points = np.zeros((m, 3))
    found = np.zeros(m, dtype=bool)
    if m == 0 or cloud.shape[0] == 0:
        return points, found
    cam = extrinsic.apply(cloud)
    vis = cam[:, 2] > 1e-9
    if not vis.any():
        return points, found
    z = cam[vis, 2]
    uv = np.column_stack(
        [
            intrinsics.fx * cam[vis, 0] / z + intrinsics.cx,
            intrinsics.fy * cam[vis, 1] / z + intrinsics.cy,
        ]
    )
    src_idx = np.nonzero(vis)[0]
    dist, nn = cKDTree(uv).query(pixels)
    hit = dist <= lift_radius
    points[hit] = cloud[src_idx[nn[hit]]]
    found[hit] = True
    return points, found


def triangulate(poses, pixels, intrinsics, min_parallax_deg=MIN_PARALLAX_DEG):
    """Linear multi-view triangulation with one Gauss-Newton refinement.

    ``poses`` are world-to-camera; ``pixels`` the matching observations.
    Raises when viewing rays are nearly parallel or when the solution
    lands behind any camera.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(poses)
    if n < 2 or pixels.shape[0] != n:
        raise ValueError("triangulation needs one pixel per pose and at least two poses")

    xn = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx
    yn = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy
    bearings = np.stack(
        [pose.rotation.T @ np.array([xn[i], yn[i], 1.0]) for i, pose in enumerate(poses)]
    )
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    cosine = np.clip(bearings @ bearings.T, -1.0, 1.0)
    max_angle = np.degrees(np.arccos(cosine.min()))
    if max_angle < min_parallax_deg:
        raise DegenerateBaselineError(
            f"max parallax {max_angle:.3f} deg below {min_parallax_deg} deg"
        )

    rows = []
    for i, pose in enumerate(poses):
        p = np.hstack([pose.rotation, pose.translation[:, None]])
        rows.append(xn[i] * p[2] - p[0])
        rows.append(yn[i] * p[2] - p[1])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hom = vt[-1]
    if abs(hom[3]) < 1e-12:
        raise DegenerateBaselineError("homogeneous solution at infinity")
    point = hom[:3] / hom[3]

    point = _polish_point(point, poses, pixels, intrinsics)
    for pose in poses:
        if pose.apply(point)[2] <= 0:
            raise NegativeDepthError("triangulated point behind a camera")
    return point


def _polish_point(point, poses, pixels, intrinsics):
    res = []
    jac = []
    for pose, pix in zip(poses, pixels):
        c = pose.apply(point)
        if c[2] <= 1e-12:
            return point
        x, y, z = c
        res.append([intrinsics.fx * x / z + intrinsics.cx - pix[0],
                    intrinsics.fy * y / z + intrinsics.cy - pix[1]])
        dpdc = np.array(
            [
                [intrinsics.fx / z, 0.0, -intrinsics.fx * x / z**2],
                [0.0, intrinsics.fy / z, -intrinsics.fy * y / z**2],
            ]
        )
        jac.append(dpdc @ pose.rotation)
    r = np.concatenate(res)
    j = np.vstack(jac)
    try:
        step = np.linalg.solve(j.T @ j, -j.T @ r)
    except np.linalg.LinAlgError:
        return point
    return point + step


def estimate_normals(points, k_neighbors=10, planarity_ratio=PLANARITY_RATIO):
    """Per-point normals from local PCA.

    The neighbourhood is the point plus its nearest neighbours; a normal
    is flagged invalid when the smallest-to-middle eigenvalue ratio
    exceeds ``planarity_ratio`` (the patch is not plane-like).  Valid
    normals are oriented toward the sensor origin.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = points.shape[0]
    if n < k_neighbors:
        raise ValueError(f"need at least {k_neighbors} points, got {n}")
    _, idx = cKDTree(points).query(points, k=k_neighbors)
    hoods = points[idx]
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, 0.0)
    normals = v[:, :, 0]
    scale = np.maximum(w[:, 2], 1e-30)
    valid = (w[:, 1] > 1e-12 * scale) & (w[:, 0] <= planarity_ratio * np.maximum(w[:, 1], 1e-30))
    toward = np.einsum("ni,ni->n", normals, points)
    normals = np.where((toward > 0)[:, None], -normals, normals)
    normals = np.where(valid[:, None], normals, 0.0)
    return PointCloud(points, normals, valid)


def pair_point_to_plane(source_points, target, max_distance=0.5, frame_i=-1, frame_j=-1):
    """Nearest-neighbour point-to-plane pairs against a cloud with normals.

    ``source_points`` must already be expressed in the target cloud's
    frame; only target points with valid normals participate.
    """
    source_points = np.asarray(source_points, dtype=float).reshape(-1, 3)
    if target.normals is None:
        raise ValueError("target cloud has no normals")
    mask = target.normal_valid
    tgt = target.points[mask]
    nrm = target.normals[mask]
    if source_points.shape[0] == 0 or tgt.shape[0] == 0:
        return []
    dist, nn = cKDTree(tgt).query(source_points)
    pairs = []
    for s, d, j in zip(source_points, dist, nn):
        if d <= max_distance:
            pairs.append(PointPlanePair(s, tgt[j].copy(), nrm[j].copy(), frame_i, frame_j))
    return pairs


class NccMatcher:
    """Matcher over raw images: cached corner detection + NCC matching."""

    def __init__(self, max_corners=400, min_score=0.6, ratio=0.8, min_matches=MIN_MATCHES):
        self.max_corners = max_corners
        self.min_score = min_score
        self.ratio = ratio
        self.min_matches = min_matches
        self._corners = {}

    def _features(self, frame):
        if frame.index not in self._corners:
            self._corners[frame.index] = detect_corners(frame.image, self.max_corners)
        return self._corners[frame.index]

    def match_frames(self, frame_a, frame_b):
        ca = self._features(frame_a)
        cb = self._features(frame_b)
        pairs = match_ncc(frame_a.image, ca, frame_b.image, cb, self.min_score, self.ratio)
        if len(pairs) < self.min_matches:
            raise TooFewMatchesError(
                f"frames ({frame_a.index}, {frame_b.index}): {len(pairs)} matches"
            )
        ia = np.array([p[0] for p in pairs], dtype=int)
        ib = np.array([p[1] for p in pairs], dtype=int)
        return MatchSet(ia, ib, ca[ia], cb[ib])


class FeatureFileMatcher:
    """Matcher over per-frame observation tables (landmark id, u, v).

    Features with equal landmark ids correspond; the table row index is
    the per-frame feature index so tracks assemble consistently.
    """

    def __init__(self, min_matches=MIN_MATCHES):
        self.min_matches = min_matches

    def _table(self, frame):
        if frame.features is None:
            raise TooFewMatchesError(f"frame {frame.index} has no feature table")
        ids = frame.features[:, 0].astype(int)
        return ids, frame.features[:, 1:3]

    def match_frames(self, frame_a, frame_b):
        ids_a, pix_a = self._table(frame_a)
        ids_b, pix_b = self._table(frame_b)
        _, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
        if ia.size < self.min_matches:
            raise TooFewMatchesError(
                f"frames ({frame_a.index}, {frame_b.index}): {ia.size} common landmarks"
            )
        return MatchSet(ia, ib, pix_a[ia], pix_b[ib])


class GroundTruthMatcher(FeatureFileMatcher):
    """Feature-table matcher with synthetic degradation.

    Adds pixel noise per observation (consistent across pairs) and, per
    frame pair, corrupts a fraction of the matches by rewiring them to
    wrong features.  Fully deterministic given the seed.
    """

    def __init__(self, pixel_sigma=0.0, outlier_fraction=0.0, seed=0, min_matches=MIN_MATCHES):
        super().__init__(min_matches)
        self.pixel_sigma = pixel_sigma
        self.outlier_fraction = outlier_fraction
        self.seed = seed
        self._noisy = {}

    def _table(self, frame):
        if frame.index not in self._noisy:
            ids, pix = super()._table(frame)
            if self.pixel_sigma > 0:
                rng = np.random.default_rng([self.seed, frame.index])
                pix = pix + rng.normal(0.0, self.pixel_sigma, pix.shape)
            self._noisy[frame.index] = (ids, pix)
        return self._noisy[frame.index]

    def match_frames(self, frame_a, frame_b):
        ms = super().match_frames(frame_a, frame_b)
        if self.outlier_fraction <= 0 or len(ms) < 2:
            return ms
        rng = np.random.default_rng([self.seed, 7919, frame_a.index, frame_b.index])
        n_bad = int(round(self.outlier_fraction * len(ms)))
        bad = rng.choice(len(ms), size=n_bad, replace=False)
        shift = rng.integers(1, len(ms), size=n_bad)
        wrong = (bad + shift) % len(ms)
        ms.index_b = ms.index_b.copy()
        ms.pixels_b = ms.pixels_b.copy()
        ms.index_b[bad] = ms.index_b[wrong]
        ms.pixels_b[bad] = ms.pixels_b[wrong]
        return ms


def build_tracks(pair_matches, min_length=2):
    """Assemble multi-frame tracks from pairwise matches by union-find.

    ``pair_matches`` maps (frame_i, frame_j) to a MatchSet.  Groups that
    collapse two different features of the same frame are dropped as
    ambiguous.  Returns TrackedPoint list with zeroed world points,
    ordered deterministically.
    """
    parent = {}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            if ry < rx:
                rx, ry = ry, rx
            parent[ry] = rx

    pixel_of = {}
    for (fi, fj), ms in sorted(pair_matches.items()):
        for k in range(len(ms)):
            ka = (fi, int(ms.index_a[k]))
            kb = (fj, int(ms.index_b[k]))
            for key, pix in ((ka, ms.pixels_a[k]), (kb, ms.pixels_b[k])):
                if key not in parent:
                    parent[key] = key
                    pixel_of[key] = np.asarray(pix, dtype=float)
            union(ka, kb)

    groups = {}
    for key in parent:
        groups.setdefault(find(key), []).append(key)

    tracks = []
    for root in sorted(groups):
        members = sorted(groups[root])
        frames = [f for f, _ in members]
        if len(set(frames)) != len(frames):
            continue  # merged identities, ambiguous
        if len(members) < min_length:
            continue
        obs = [(f, pixel_of[(f, i)]) for f, i in members]
        tracks.append(TrackedPoint(np.zeros(3), obs))
    return tracks
