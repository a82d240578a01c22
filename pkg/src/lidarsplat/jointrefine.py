"""Joint optimization of camera poses, structure and the sensor extrinsic.

Minimizes a weighted sum of three residual families over the camera
poses T_i (world to camera), the LiDAR-to-camera transform T_e, and the
triangulated points x:

* camera: project(K, T_i x) - u, squared norm per observation;
* lidar:  n . ((T_e^-1 T_j T_i^-1 T_e) p - q) between two LiDAR frames;
* cross:  n . (T_e^-1 T_i x - q), tying image structure to clouds.

Each scalar family is squared in the cost with a Huber kernel applied
by iteratively reweighted least squares.  An outer loop re-derives all
associations as the extrinsic improves.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .association import (
    PointPlanePair,
    TrackedPoint,
    build_tracks,
    estimate_normals,
    lift_to_3d,
    triangulate,
)
from .errors import (
    DegenerateBaselineError,
    InsufficientInliersError,
    NegativeDepthError,
    TooFewMatchesError,
)
from .geometry import Pose, exp_se3, pose_difference
from .posegraph import PoseGraph, filter_edges, initialize_poses, optimize_pose_graph
from .relmotion import RelativeMotionEdge, ransac_rigid

MIN_OBS_DEPTH = 1e-6


@dataclass
class JointRefineConfig:
    lambda_c: float = 1.0
    lambda_l: float = 20.0
    lambda_j: float = 10.0
    huber_pixel: float = 2.0
    huber_meter: float = 0.1
    ransac_iters: int = 1000
    inlier_thresh: float = 0.05
    min_inliers: int = 12
    angle_tol: float = np.radians(2.0)
    trans_tol: float = 0.1
    rate_threshold: float = 0.5
    lift_radius: float = 3.0
    normal_neighbors: int = 10
    planarity_ratio: float = 0.2
    pair_max_dist: float = 0.2
    max_lidar_pairs_per_edge: int = 200
    track_reproj_tol: float = 5.0
    min_track_length: int = 2
    max_outer_iters: int = 10
    extrinsic_tol_rot: float = 1e-4
    extrinsic_tol_trans: float = 1e-4
    solver_max_iters: int = 50
    solver_rel_tol: float = 1e-10
    gauge: int = 0
    seed: int = 0


@dataclass
class JointProblem:
    poses: list
    extrinsic: Pose
    tracked_points: list  # TrackedPoint
    lidar_pairs: list  # PointPlanePair, source in frame_i LiDAR coords
    cross_pairs: list  # (tracked point index, PointPlanePair with frame_i set)
    intrinsics: object
    lambda_c: float = 1.0
    lambda_l: float = 20.0
    lambda_j: float = 10.0
    huber_pixel: float = 2.0
    huber_meter: float = 0.1
    gauge: int = 0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_l, self.lambda_j) < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class RefineResult:
    poses: list
    extrinsic: Pose
    tracks: list
    history: list  # per outer iteration: dict with extrinsic and deltas
    converged: bool
    extrinsic_degenerate: bool = False
    edge_stats: list = field(default_factory=list)
    solve_info: dict = field(default_factory=dict)


def _stacks(poses):
    rot = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    return rot, trans


def _observation_arrays(tracked_points):
    pt_idx, fr_idx, uv = [], [], []
    for t, track in enumerate(tracked_points):
        for f, pix in track.observations:
            pt_idx.append(t)
            fr_idx.append(f)
            uv.append(pix)
    if not pt_idx:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2))
    return np.array(pt_idx), np.array(fr_idx), np.asarray(uv, dtype=float)


def camera_residuals(problem, poses=None, points=None):
    """Reprojection residuals (M, 2) with a validity mask.

    Observations whose point depth is at most 1e-6 are dropped: their
    rows are zeroed and masked out.
    """
    poses = problem.poses if poses is None else poses
    if points is None:
        points = np.array([t.world_point for t in problem.tracked_points]).reshape(-1, 3)
    pt_idx, fr_idx, uv = _observation_arrays(problem.tracked_points)
    if pt_idx.size == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    rot, trans = _stacks(poses)
    y = np.einsum("mij,mj->mi", rot[fr_idx], points[pt_idx]) + trans[fr_idx]
    valid = y[:, 2] > MIN_OBS_DEPTH
    z = np.where(valid, y[:, 2], 1.0)
    k = problem.intrinsics
    res = np.column_stack(
        [k.fx * y[:, 0] / z + k.cx - uv[:, 0], k.fy * y[:, 1] / z + k.cy - uv[:, 1]]
    )
    res[~valid] = 0.0
    return res, valid


def lidar_residuals(problem, poses=None, extrinsic=None):
    """Signed point-to-plane residuals between LiDAR frame pairs."""
    poses = problem.poses if poses is None else poses
    extrinsic = problem.extrinsic if extrinsic is None else extrinsic
    if not problem.lidar_pairs:
        return np.zeros(0)
    rot, trans = _stacks(poses)
    re, te = extrinsic.rotation, extrinsic.translation
    p = np.array([pr.source for pr in problem.lidar_pairs])
    q = np.array([pr.target for pr in problem.lidar_pairs])
    n = np.array([pr.normal for pr in problem.lidar_pairs])
    fi = np.array([pr.frame_i for pr in problem.lidar_pairs])
    fj = np.array([pr.frame_j for pr in problem.lidar_pairs])
    z1 = p @ re.T + te
    z2 = np.einsum("ki,kij->kj", z1 - trans[fi], rot[fi])
    z3 = np.einsum("kij,kj->ki", rot[fj], z2) + trans[fj]
    out = (z3 - te) @ re
    return np.einsum("ki,ki->k", n, out - q)


def joint_residuals(problem, poses=None, extrinsic=None, points=None):
    """Signed residuals tying triangulated points to LiDAR local planes."""
    poses = problem.poses if poses is None else poses
    extrinsic = problem.extrinsic if extrinsic is None else extrinsic
    if points is None:
        points = np.array([t.world_point for t in problem.tracked_points]).reshape(-1, 3)
    if not problem.cross_pairs:
        return np.zeros(0)
    rot, trans = _stacks(poses)
    re, te = extrinsic.rotation, extrinsic.translation
    tid = np.array([c[0] for c in problem.cross_pairs])
    q = np.array([c[1].target for c in problem.cross_pairs])
    n = np.array([c[1].normal for c in problem.cross_pairs])
    fi = np.array([c[1].frame_i for c in problem.cross_pairs])
    w1 = np.einsum("kij,kj->ki", rot[fi], points[tid]) + trans[fi]
    out = (w1 - te) @ re
    return np.einsum("ki,ki->k", n, out - q)


def _huber_cost(s, delta):
    s = np.abs(s)
    return np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)


def _huber_weight(s, delta):
    s = np.abs(s)
    return np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-30))


def _evaluate(problem, poses, extrinsic, points):
    cam, cam_valid = camera_residuals(problem, poses, points)
    lid = lidar_residuals(problem, poses, extrinsic)
    cro = joint_residuals(problem, poses, extrinsic, points)
    return cam, cam_valid, lid, cro


def _cost_terms(problem, cam, lid, cro):
    cam_norm = np.linalg.norm(cam, axis=1)
    terms = {
        "camera": problem.lambda_c * float(_huber_cost(cam_norm, problem.huber_pixel).sum()),
        "lidar": problem.lambda_l * float(_huber_cost(lid, problem.huber_meter).sum()),
        "cross": problem.lambda_j * float(_huber_cost(cro, problem.huber_meter).sum()),
    }
    return sum(terms.values()), terms


class _System:
    """Sparse weighted Gauss-Newton system accumulated family by family."""

    def __init__(self, n_params):
        self.rows = []
        self.cols = []
        self.vals = []
        self.res = []
        self.n_rows = 0
        self.n_params = n_params

    def add_rows(self, residuals, scale, blocks):
        """residuals (R,) or (R, per); blocks: list of (col0 (R,), jac (R, per, width)).

        col0 entries of -1 mark blocks held fixed (the gauge pose)."""
        if residuals.ndim == 1:
            residuals = residuals[:, None]
        r, per = residuals.shape
        if r == 0:
            return
        row0 = self.n_rows + per * np.arange(r)
        for col0, jac in blocks:
            keep = col0 >= 0
            if not keep.any():
                continue
            width = jac.shape[2]
            rr = (row0[keep, None, None] + np.arange(per)[None, :, None]).repeat(width, 2)
            cc = np.broadcast_to(
                col0[keep, None, None] + np.arange(width)[None, None, :], rr.shape
            )
            vv = jac[keep] * scale[keep, None, None]
            self.rows.append(rr.ravel())
            self.cols.append(cc.ravel())
            self.vals.append(vv.ravel())
        self.res.append((residuals * scale[:, None]).ravel())
        self.n_rows += per * r

    def normal_equations(self):
        if not self.res:
            n = self.n_params
            return np.zeros(n), np.zeros((n, n))
        j = sparse.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n_rows, self.n_params),
        ).tocsr()
        r = np.concatenate(self.res)
        grad = j.T @ r
        hess = (j.T @ j).toarray()
        return grad, hess


def _build_system(problem, poses, extrinsic, points, layout):
    pose_col, e_col, pt_col0, n_params = layout
    k = problem.intrinsics
    rot, trans = _stacks(poses)
    re, te = extrinsic.rotation, extrinsic.translation
    sys = _System(n_params)

    # camera family
    cam, cam_valid = camera_residuals(problem, poses, points)
    pt_idx, fr_idx, _ = _observation_arrays(problem.tracked_points)
    if pt_idx.size:
        y = np.einsum("mij,mj->mi", rot[fr_idx], points[pt_idx]) + trans[fr_idx]
        z = np.where(cam_valid, y[:, 2], 1.0)
        a = np.zeros((pt_idx.size, 2, 3))
        a[:, 0, 0] = k.fx / z
        a[:, 0, 2] = -k.fx * y[:, 0] / z**2
        a[:, 1, 1] = k.fy / z
        a[:, 1, 2] = -k.fy * y[:, 1] / z**2
        a[~cam_valid] = 0.0
        skew_y = np.zeros((pt_idx.size, 3, 3))
        skew_y[:, 0, 1] = -y[:, 2]
        skew_y[:, 0, 2] = y[:, 1]
        skew_y[:, 1, 0] = y[:, 2]
        skew_y[:, 1, 2] = -y[:, 0]
        skew_y[:, 2, 0] = -y[:, 1]
        skew_y[:, 2, 1] = y[:, 0]
        j_pose = np.concatenate([-np.einsum("mab,mbc->mac", a, skew_y), a], axis=2)
        j_point = np.einsum("mab,mbc->mac", a, rot[fr_idx])
        w = _huber_weight(np.linalg.norm(cam, axis=1), problem.huber_pixel)
        scale = np.sqrt(problem.lambda_c * w)
        sys.add_rows(
            cam,
            scale,
            [
                (np.array([pose_col.get(f, -1) for f in fr_idx]), j_pose),
                (pt_col0 + 3 * pt_idx, j_point),
            ],
        )

    # lidar family
    lid = lidar_residuals(problem, poses, extrinsic)
    if lid.size:
        p = np.array([pr.source for pr in problem.lidar_pairs])
        n = np.array([pr.normal for pr in problem.lidar_pairs])
        fi = np.array([pr.frame_i for pr in problem.lidar_pairs])
        fj = np.array([pr.frame_j for pr in problem.lidar_pairs])
        z1 = p @ re.T + te
        z2 = np.einsum("ki,kij->kj", z1 - trans[fi], rot[fi])
        z3 = np.einsum("kij,kj->ki", rot[fj], z2) + trans[fj]
        c = n @ re.T  # R_e n
        b = np.einsum("ki,kij->kj", c, rot[fj])  # R_j^T R_e n
        b = np.einsum("kij,kj->ki", rot[fi], b)  # R_i R_j^T R_e n
        j_i = np.concatenate([np.cross(b, z1), -b], axis=1)[:, None, :]
        j_j = np.concatenate([-np.cross(c, z3), c], axis=1)[:, None, :]
        j_e = -(j_i + j_j)
        w = _huber_weight(lid, problem.huber_meter)
        scale = np.sqrt(problem.lambda_l * w)
        sys.add_rows(
            lid,
            scale,
            [
                (np.array([pose_col.get(f, -1) for f in fi]), j_i),
                (np.array([pose_col.get(f, -1) for f in fj]), j_j),
                (np.full(lid.size, e_col), j_e),
            ],
        )

    # cross family
    cro = joint_residuals(problem, poses, extrinsic, points)
    if cro.size:
        tid = np.array([cp[0] for cp in problem.cross_pairs])
        n = np.array([cp[1].normal for cp in problem.cross_pairs])
        fi = np.array([cp[1].frame_i for cp in problem.cross_pairs])
        w1 = np.einsum("kij,kj->ki", rot[fi], points[tid]) + trans[fi]
        c = n @ re.T
        d = np.einsum("ki,kij->kj", c, rot[fi])  # R_i^T R_e n
        j_i = np.concatenate([-np.cross(c, w1), c], axis=1)[:, None, :]
        j_e = -j_i
        j_x = d[:, None, :]
        w = _huber_weight(cro, problem.huber_meter)
        scale = np.sqrt(problem.lambda_j * w)
        sys.add_rows(
            cro,
            scale,
            [
                (np.array([pose_col.get(f, -1) for f in fi]), j_i),
                (np.full(cro.size, e_col), j_e),
                (pt_col0 + 3 * tid, j_x),
            ],
        )
    return sys, (cam, cam_valid, lid, cro)


def solve_joint(problem, max_iters=50, rel_tol=1e-10, max_damping=1e10):
    """Levenberg-Marquardt bundle solve of the three-family cost.

    Returns (poses, extrinsic, points (P, 3), info).  The gauge pose is
    held fixed.  On divergence the inputs are returned with the
    ``diverged`` flag set.
    """
    poses = list(problem.poses)
    extrinsic = problem.extrinsic
    points = np.array([t.world_point for t in problem.tracked_points]).reshape(-1, 3)
    n_frames = len(poses)
    free = [i for i in range(n_frames) if i != problem.gauge]
    pose_col = {f: 6 * i for i, f in enumerate(free)}
    e_col = 6 * len(free)
    pt_col0 = e_col + 6
    n_params = pt_col0 + 3 * points.shape[0]
    layout = (pose_col, e_col, pt_col0, n_params)

    def apply_step(step, poses, extrinsic, points):
        new_poses = list(poses)
        for f, c in pose_col.items():
            new_poses[f] = exp_se3(step[c : c + 6]) @ poses[f]
        new_extr = exp_se3(step[e_col : e_col + 6]) @ extrinsic
        new_pts = points + step[pt_col0:].reshape(-1, 3)
        return new_poses, new_extr, new_pts

    cam, cam_valid, lid, cro = _evaluate(problem, poses, extrinsic, points)
    cost, _ = _cost_terms(problem, cam, lid, cro)
    costs = [cost]
    info = {"converged": False, "diverged": False, "iterations": 0, "costs": costs}
    lam = 1e-6
    hess = np.zeros((n_params, n_params))
    for it in range(max_iters):
        # already at numerical zero: stationary by construction
        if cost <= 1e-20:
            info["converged"] = True
            break
        sys, _ = _build_system(problem, poses, extrinsic, points, layout)
        grad, hess = sys.normal_equations()
        if np.abs(grad).max() < 1e-12:
            info["converged"] = True
            break
        damp = np.where(np.diag(hess) > 0, np.diag(hess), 1.0)

        accepted = False
        cost_new = cost
        while lam <= max_damping:
            try:
                step = np.linalg.solve(hess + lam * np.diag(damp), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = apply_step(step, poses, extrinsic, points)
            cam, cam_valid, lid, cro = _evaluate(problem, *cand)
            cost_new, _ = _cost_terms(problem, cam, lid, cro)
            if cost_new < cost:
                poses, extrinsic, points = cand
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10.0

        if not accepted:
            if it > 0:
                info["converged"] = True
                break
            info["diverged"] = True
            pts0 = np.array([t.world_point for t in problem.tracked_points]).reshape(-1, 3)
            return list(problem.poses), problem.extrinsic, pts0, info

        info["iterations"] = it + 1
        costs.append(cost_new)
        drop = (cost - cost_new) / max(cost, 1e-300)
        cost = cost_new
        if drop < rel_tol:
            info["converged"] = True
            break
    else:
        info["converged"] = True

    sys, final = _build_system(problem, poses, extrinsic, points, layout)
    _, hess = sys.normal_equations()
    cam, cam_valid, lid, cro = final
    cost, terms = _cost_terms(problem, cam, lid, cro)
    info["cost_terms"] = terms
    info["final_cost"] = cost
    info["extrinsic_hessian"] = hess[e_col : e_col + 6, e_col : e_col + 6].copy()
    info["dropped_observations"] = int((~cam_valid).sum())
    return poses, extrinsic, points, info


def default_pair_policy(n_frames, window=5, anchor_stride=10):
    """Consecutive window pairs plus periodic anchor frames."""
    pairs = set()
    for j in range(n_frames):
        for i in range(max(0, j - window), j):
            pairs.add((i, j))
        if j % anchor_stride == 0:
            for i in range(0, j, anchor_stride):
                pairs.add((i, j))
    return sorted(pairs)


def _frame_normals(frames, cfg):
    """Per-frame planar targets: (valid points, their normals, KD-tree).

    Keyed by position in the frame list, matching edge and track indices."""
    out = {}
    for k, f in enumerate(frames):
        entry = None
        if f.cloud.shape[0] >= cfg.normal_neighbors:
            cloud = estimate_normals(f.cloud, cfg.normal_neighbors, cfg.planarity_ratio)
            if cloud.normal_valid.any():
                pts = cloud.points[cloud.normal_valid]
                nrm = cloud.normals[cloud.normal_valid]
                entry = (pts, nrm, cKDTree(pts))
        out[k] = entry
    return out


def _nearest_plane(normal_cache, frame_index, query):
    pts, nrm, tree = normal_cache[frame_index]
    dist, nn = tree.query(query)
    return dist, pts[nn], nrm[nn]


def refine_with_extrinsic_iterations(
    frames, matcher, intrinsics, initial_extrinsic, pairs=None, config=None
):
    """Alternate association and joint solving until the extrinsic settles.

    Each outer iteration lifts 2D matches through the current extrinsic,
    estimates relative motions (RANSAC), screens them by cycle
    consistency, initializes and optimizes the pose graph, triangulates
    feature tracks, builds LiDAR and cross point-to-plane pairs, and
    runs the joint bundle solve.  Stops when the extrinsic moves less
    than the tolerance between iterations; otherwise flags
    non-convergence after the iteration cap.
    """
    cfg = config or JointRefineConfig()
    n = len(frames)
    if pairs is None:
        pairs = default_pair_policy(n)

    matchsets = {}
    for i, j in pairs:
        try:
            matchsets[(i, j)] = matcher.match_frames(frames[i], frames[j])
        except TooFewMatchesError:
            continue
    tracks2d = build_tracks(matchsets, cfg.min_track_length)
    normal_cache = _frame_normals(frames, cfg)

    extrinsic = initial_extrinsic
    history = []
    converged = False
    poses = [Pose.identity() for _ in range(n)]
    tracks = []
    edge_stats = []
    solve_info = {}
    for outer in range(cfg.max_outer_iters):
        edges = []
        for (i, j), ms in sorted(matchsets.items()):
            la, fa = lift_to_3d(ms.pixels_a, frames[i].cloud, intrinsics, extrinsic, cfg.lift_radius)
            lb, fb = lift_to_3d(ms.pixels_b, frames[j].cloud, intrinsics, extrinsic, cfg.lift_radius)
            both = fa & fb
            if both.sum() < 3:
                continue
            q_i = extrinsic.apply(la[both])
            p_j = extrinsic.apply(lb[both])
            # seeded per pair, not per iteration: once the lifted sets stop
            # changing the whole association stage is a fixed point
            rng = np.random.default_rng([cfg.seed, i, j])
            try:
                pose, mask, rms = ransac_rigid(
                    p_j, q_i, rng, cfg.ransac_iters, cfg.inlier_thresh, cfg.min_inliers
                )
            except InsufficientInliersError:
                continue
            edges.append(RelativeMotionEdge(i, j, pose, int(mask.sum()), rms))

        valid_edges, edge_stats = filter_edges(
            edges, None, cfg.angle_tol, cfg.trans_tol, cfg.rate_threshold
        )
        init = initialize_poses(n, valid_edges, root=cfg.gauge)
        poses, _ = optimize_pose_graph(PoseGraph(init, valid_edges, cfg.gauge))

        tracks = []
        for t in tracks2d:
            obs_poses = [poses[f] for f, _ in t.observations]
            pixels = np.array([pix for _, pix in t.observations])
            try:
                x = triangulate(obs_poses, pixels, intrinsics)
            except (DegenerateBaselineError, NegativeDepthError):
                continue
            errs = []
            for pose, pix in zip(obs_poses, pixels):
                yc = pose.apply(x)
                errs.append(
                    np.hypot(
                        intrinsics.fx * yc[0] / yc[2] + intrinsics.cx - pix[0],
                        intrinsics.fy * yc[1] / yc[2] + intrinsics.cy - pix[1],
                    )
                )
            if max(errs) > cfg.track_reproj_tol:
                continue
            tracks.append(TrackedPoint(x, list(t.observations)))

        lidar_pairs = []
        for e in valid_edges:
            src = frames[e.i].cloud
            if src.shape[0] == 0 or normal_cache[e.j] is None:
                continue
            rng = np.random.default_rng([cfg.seed, 104729, e.i, e.j])
            if src.shape[0] > cfg.max_lidar_pairs_per_edge:
                pick = rng.choice(src.shape[0], cfg.max_lidar_pairs_per_edge, replace=False)
                pick.sort()
                src = src[pick]
            chain = extrinsic.inverse() @ poses[e.j] @ poses[e.i].inverse() @ extrinsic
            moved = chain.apply(src)
            dist, q, nrm = _nearest_plane(normal_cache, e.j, moved)
            keep = dist <= cfg.pair_max_dist
            for s, qq, nn in zip(src[keep], q[keep], nrm[keep]):
                lidar_pairs.append(PointPlanePair(s, qq, nn, e.i, e.j))

        cross_pairs = []
        extr_inv = extrinsic.inverse()
        for tid, t in enumerate(tracks):
            for f, _ in t.observations:
                if normal_cache[f] is None:
                    continue
                y = extr_inv.apply(poses[f].apply(t.world_point))
                dist, q, nrm = _nearest_plane(normal_cache, f, y[None, :])
                if dist[0] <= cfg.pair_max_dist:
                    cross_pairs.append((tid, PointPlanePair(y, q[0], nrm[0], f, f)))

        problem = JointProblem(
            poses,
            extrinsic,
            tracks,
            lidar_pairs,
            cross_pairs,
            intrinsics,
            cfg.lambda_c,
            cfg.lambda_l,
            cfg.lambda_j,
            cfg.huber_pixel,
            cfg.huber_meter,
            cfg.gauge,
        )
        poses, new_extrinsic, points, solve_info = solve_joint(
            problem, cfg.solver_max_iters, cfg.solver_rel_tol
        )
        for t, x in zip(tracks, points):
            t.world_point = x
        d_angle, d_trans = pose_difference(new_extrinsic, extrinsic)
        extrinsic = new_extrinsic
        history.append(
            {
                "iteration": outer + 1,
                "extrinsic": extrinsic,
                "delta_angle_deg": float(np.degrees(d_angle)),
                "delta_trans_m": float(d_trans),
            }
        )
        if d_angle < cfg.extrinsic_tol_rot and d_trans < cfg.extrinsic_tol_trans:
            converged = True
            break

    degenerate = True
    h_ee = solve_info.get("extrinsic_hessian")
    if h_ee is not None:
        eig = np.linalg.eigvalsh(h_ee)
        degenerate = eig[0] <= 1e-9 * max(eig[-1], 1e-30)
    return RefineResult(
        poses, extrinsic, tracks, history, converged, degenerate, edge_stats, solve_info
    )


def write_extrinsic_history(path, history):
    """One line per outer iteration:
    iter tx ty tz qx qy qz qw delta_angle_deg delta_trans_m."""
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for row in history:
            e = row["extrinsic"]
            quat = Rotation.from_matrix(e.rotation).as_quat()
            nums = " ".join(f"{x:.9g}" for x in (*e.translation, *quat))
            fh.write(
                f"{row['iteration']} {nums} "
                f"{row['delta_angle_deg']:.9g} {row['delta_trans_m']:.9g}\n"
            )
    os.replace(tmp, path)
