"""Cycle validation and global pose-graph optimization.

Edges carry relative transforms between camera frames (T_ij maps
j-coords into i-coords, so a consistent triangle composes to identity
as T_ij T_jk T_ki).  Edges are screened by triangle consistency before
a Levenberg-Marquardt solve over per-node se(3) increments.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DisconnectedGraphError
from .geometry import Pose, exp_se3, log_se3, rotation_angle

ANGLE_TOL = np.radians(2.0)
TRANS_TOL = 0.1
RATE_THRESHOLD = 0.5
FD_STEP = 1e-6


@dataclass
class EdgeStats:
    edge: tuple  # (i, j)
    n_passed: int
    n_involved: int
    r_success: float


@dataclass
class PoseGraph:
    poses: list  # node index -> Pose (world to camera)
    edges: list  # RelativeMotionEdge
    gauge: int = 0


def cycle_error(t_ij, t_jk, t_ki):
    """Rotation angle and translation norm of one triangle composite.

    The arguments chain j->i, k->j, i->k, so their in-order product
    maps i-coords back to i-coords and is identity for consistent edges.
    """
    composite = t_ij @ t_jk @ t_ki
    return rotation_angle(composite.rotation), float(np.linalg.norm(composite.translation))


def find_triangles(edges):
    """All 3-cliques of the edge graph as sorted node triples."""
    adjacency = {}
    for e in edges:
        adjacency.setdefault(e.i, set()).add(e.j)
        adjacency.setdefault(e.j, set()).add(e.i)
    triangles = []
    for a in sorted(adjacency):
        for b in sorted(adjacency[a]):
            if b <= a:
                continue
            for c in sorted(adjacency[a] & adjacency[b]):
                if c > b:
                    triangles.append((a, b, c))
    return triangles


def filter_edges(
    edges,
    cycle_set=None,
    angle_tol=ANGLE_TOL,
    trans_tol=TRANS_TOL,
    rate_threshold=RATE_THRESHOLD,
):
    """Score edges by triangle consistency and drop chronic failures.

    A triangle passes when both the composite rotation angle and the
    composite translation norm are within tolerance; an edge survives
    when its pass rate is at least ``rate_threshold``.  Edges in no
    triangle are kept unjudged.
    """
    lookup = {}
    for idx, e in enumerate(edges):
        lookup[frozenset((e.i, e.j))] = idx
    if cycle_set is None:
        cycle_set = find_triangles(edges)

    passed = np.zeros(len(edges), dtype=int)
    involved = np.zeros(len(edges), dtype=int)
    for a, b, c in cycle_set:
        idxs = [lookup[frozenset(p)] for p in ((a, b), (b, c), (c, a))]
        legs = []
        for (x, y), idx in zip(((a, b), (b, c), (c, a)), idxs):
            e = edges[idx]
            legs.append(e.pose if (e.i, e.j) == (x, y) else e.pose.inverse())
        angle, trans = cycle_error(*legs)
        ok = angle <= angle_tol and trans <= trans_tol
        for idx in idxs:
            involved[idx] += 1
            passed[idx] += ok

    stats = []
    valid = []
    for idx, e in enumerate(edges):
        rate = passed[idx] / involved[idx] if involved[idx] else 1.0
        stats.append(EdgeStats((e.i, e.j), int(passed[idx]), int(involved[idx]), float(rate)))
        if involved[idx] == 0 or rate >= rate_threshold:
            valid.append(e)
    return valid, stats


def _components(num_nodes, edges):
    seen = [False] * num_nodes
    adjacency = {}
    for e in edges:
        adjacency.setdefault(e.i, []).append(e.j)
        adjacency.setdefault(e.j, []).append(e.i)
    comps = []
    for start in range(num_nodes):
        if seen[start]:
            continue
        comp = []
        queue = [start]
        seen[start] = True
        while queue:
            node = queue.pop(0)
            comp.append(node)
            for other in adjacency.get(node, []):
                if not seen[other]:
                    seen[other] = True
                    queue.append(other)
        comps.append(comp)
    return comps


def initialize_poses(num_nodes, edges, root=0):
    """Chain poses over a breadth-first spanning tree from the root."""
    comps = _components(num_nodes, edges)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    adjacency = {}
    for e in edges:
        adjacency.setdefault(e.i, []).append(e)
        adjacency.setdefault(e.j, []).append(e)
    poses = [None] * num_nodes
    poses[root] = Pose.identity()
    queue = [root]
    while queue:
        node = queue.pop(0)
        for e in adjacency.get(node, []):
            if poses[e.i] is None:
                poses[e.i] = e.pose @ poses[e.j]
                queue.append(e.i)
            elif poses[e.j] is None:
                poses[e.j] = e.pose.inverse() @ poses[e.i]
                queue.append(e.j)
    return poses


def edge_residuals(poses, edges):
    """Stacked 6-dim closure logs, one block per edge."""
    out = np.empty(6 * len(edges))
    for k, e in enumerate(edges):
        out[6 * k : 6 * k + 6] = log_se3(e.pose @ poses[e.j] @ poses[e.i].inverse())
    return out


def _edge_jacobian(poses, e, node, h=FD_STEP):
    """Central differences of one edge residual wrt one endpoint's local se(3)."""
    jac = np.empty((6, 6))
    base = list(poses)
    for axis in range(6):
        delta = np.zeros(6)
        delta[axis] = h
        plus = exp_se3(delta) @ poses[node]
        minus = exp_se3(-delta) @ poses[node]
        base[node] = plus
        rp = log_se3(e.pose @ base[e.j] @ base[e.i].inverse())
        base[node] = minus
        rm = log_se3(e.pose @ base[e.j] @ base[e.i].inverse())
        base[node] = poses[node]
        jac[:, axis] = (rp - rm) / (2.0 * h)
    return jac


def optimize_pose_graph(graph, max_iters=100, rel_tol=1e-10, max_damping=1e10):
    """Levenberg-Marquardt over per-node se(3) increments.

    Minimizes the summed squared logarithm of the edge closure errors
    with the gauge node pinned.  Returns (poses, info) where info holds
    the cost trace and the converged/diverged flags; on divergence the
    initial poses are returned unchanged with ``diverged`` set.
    """
    poses = list(graph.poses)
    edges = graph.edges
    n = len(poses)
    free = [k for k in range(n) if k != graph.gauge]
    col_of = {node: 6 * idx for idx, node in enumerate(free)}

    def cost_of(r):
        return float(r @ r)

    r = edge_residuals(poses, edges)
    cost = cost_of(r)
    costs = [cost]
    info = {"converged": False, "diverged": False, "iterations": 0, "costs": costs}
    lam = 1e-6
    for it in range(max_iters):
        jac = np.zeros((6 * len(edges), 6 * len(free)))
        for k, e in enumerate(edges):
            rows = slice(6 * k, 6 * k + 6)
            for node in (e.i, e.j):
                if node == graph.gauge:
                    continue
                jac[rows, col_of[node] : col_of[node] + 6] = _edge_jacobian(poses, e, node)
        grad = jac.T @ r
        hess = jac.T @ jac

        accepted = False
        while lam <= max_damping:
            try:
                step = np.linalg.solve(hess + lam * np.eye(hess.shape[0]), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = list(poses)
            for idx, node in enumerate(free):
                candidate[node] = exp_se3(step[6 * idx : 6 * idx + 6]) @ poses[node]
            r_new = edge_residuals(candidate, edges)
            cost_new = cost_of(r_new)
            if cost_new < cost:
                poses = candidate
                r = r_new
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10.0

        info["iterations"] = it + 1
        if not accepted:
            if cost <= 1e-20 or it > 0:
                # stall at (numerical) optimum after real progress
                info["converged"] = True
                costs.append(cost)
                return poses, info
            info["diverged"] = True
            return list(graph.poses), info

        costs.append(cost_new)
        drop = (cost - cost_new) / max(cost, 1e-300)
        cost = cost_new
        if drop < rel_tol:
            info["converged"] = True
            return poses, info
    info["converged"] = True
    return poses, info


def dump_graph(path, edges, stats=None):
    """One edge per line: i j tx ty tz qx qy qz qw R_success."""
    rate_of = {}
    if stats:
        rate_of = {s.edge: s.r_success for s in stats}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for e in edges:
            q = Rotation.from_matrix(e.pose.rotation).as_quat()
            nums = " ".join(f"{x:.9g}" for x in (*e.pose.translation, *q))
            rate = rate_of.get((e.i, e.j), 1.0)
            fh.write(f"{e.i} {e.j} {nums} {rate:.6f}\n")
    os.replace(tmp, path)
