"""Keyframe pose refinement from the densified structure.

Stages: (1) a two-view consistency check that keeps only depth values
agreeing with the previous keyframe's maps warped into the current view,
(2) first-order propagation of pose uncertainty into per-pixel depth
variance, (3) per-pixel composition of the consistent variance map,
(4) relative-pose (Sim(3)) refinement by direct alignment of image and
depth, and (5) pose-graph optimization over all keyframes.

Poses are camera-to-world throughout; the relative transform taking
points from view a to view b is inverse(pose_b) * pose_a.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .geometry import (Sim3Pose, bilinear_sample, compose, inverse, sim3_exp,
                       sim3_log, warp_depth_map)

SOURCE_NONE = 0
SOURCE_SEMI_DENSE = 1
SOURCE_DENSIFIED = 2
SOURCE_REJECTED = 3


class MissingVariance(DataError):
    """A kept pixel has no variance in its source map."""


class InsufficientOverlap(NumericError):
    """Too few usable residuals to refine a constraint."""


class Diverged(NumericError):
    """Alignment energy increased for too many consecutive iterations."""


class DisconnectedGraph(DataError):
    """Pose graph is not connected (or the fixed node is missing)."""


@dataclass(frozen=True)
class ViewDepths:
    """Per-keyframe inputs of the consistency check: pose plus the
    filtered semi-dense and densified inverse-depth maps."""

    pose: Sim3Pose
    semi: np.ndarray
    dense: np.ndarray


@dataclass(frozen=True)
class ConsistentDepth:
    """Two-view consistent depth: values, variance placeholder and a
    per-pixel source tag (semi-dense / densified / rejected)."""

    depth: np.ndarray
    variance: np.ndarray
    source: np.ndarray  # uint8 tags


@dataclass(frozen=True)
class PoseGraphEdge:
    i: int
    j: int
    constraint: Sim3Pose          # maps points from view j to view i
    information: np.ndarray = field(default_factory=lambda: np.eye(7))


@dataclass
class PoseGraph:
    nodes: list   # (keyframe id, Sim3Pose)
    edges: list   # PoseGraphEdge


# ---------------------------------------------------------------------------
# two-view consistency

def two_view_consistent(cur: ViewDepths, prev: ViewDepths, intrinsics,
                        tau_e: float) -> ConsistentDepth:
    """Keep current depth values that agree with the previous keyframe.

    The previous filtered semi-dense map, and separately the previous
    densified map with its semi-dense pixels excluded, are warped into
    the current view.  A current value with a warped counterpart survives
    iff the inverse depths differ by less than tau_e; values without a
    counterpart pass through unverified.  Semi-dense values take
    precedence over densified ones; the variance field is left zero and
    filled by compose_consistent_variance.
    """
    rel = compose(inverse(cur.pose), prev.pose)
    warped_semi = warp_depth_map(prev.semi, rel, intrinsics)
    dense_only = np.where(prev.semi > 0, 0.0, prev.dense)
    warped_dense = warp_depth_map(dense_only, rel, intrinsics)

    semi_valid = cur.semi > 0
    dense_valid = cur.dense > 0

    value = np.where(semi_valid, cur.semi, cur.dense)
    source = np.where(semi_valid, SOURCE_SEMI_DENSE,
                      np.where(dense_valid, SOURCE_DENSIFIED, SOURCE_NONE))
    reference = np.where(semi_valid, warped_semi, warped_dense)

    verifiable = (source != SOURCE_NONE) & (reference > 0)
    rejected = verifiable & (np.abs(value - reference) >= tau_e)

    out_source = np.where(source == SOURCE_NONE, SOURCE_REJECTED, source)
    out_source = np.where(rejected, SOURCE_REJECTED, out_source).astype(np.uint8)
    out_depth = np.where(out_source != SOURCE_REJECTED, value, 0.0)
    return ConsistentDepth(depth=out_depth,
                           variance=np.zeros_like(out_depth),
                           source=out_source)


# ---------------------------------------------------------------------------
# pose-uncertainty propagation

def _warp_depth_jacobian(points_warped: np.ndarray, inv_depth_warped: np.ndarray):
    """Derivative of the warped inverse depth with respect to a
    left-multiplied pose perturbation, per point.

    points_warped: (N, 3) already-transformed points; returns (N, 7)
    rows [0, 0, 1, W_y, -W_x, 0, W_z] scaled by -d_w^2.
    """
    n = points_warped.shape[0]
    jac = np.zeros((n, 7))
    jac[:, 2] = 1.0
    jac[:, 3] = points_warped[:, 1]
    jac[:, 4] = -points_warped[:, 0]
    jac[:, 6] = points_warped[:, 2]
    return -(inv_depth_warped**2)[:, None] * jac


def propagate_pose_uncertainty(inv_depth: float, pixel, rel_pose: Sim3Pose,
                               cov: np.ndarray, intrinsics) -> float:
    """Variance of the warped inverse depth of one pixel induced by the
    relative-pose covariance (first order: J cov J^T, clamped at 0)."""
    from .geometry import backproject

    point = rel_pose.apply(backproject(pixel, inv_depth, intrinsics))
    d_w = 1.0 / point[2]
    jac = _warp_depth_jacobian(point[None, :], np.array([d_w]))[0]
    var = float(jac @ np.asarray(cov, dtype=np.float64) @ jac)
    return max(var, 0.0)


def pose_uncertainty_map(depth: np.ndarray, rel_pose: Sim3Pose,
                         cov: np.ndarray, intrinsics) -> np.ndarray:
    """Vectorized propagate_pose_uncertainty over a whole map; invalid or
    behind-camera pixels get variance 0."""
    from .geometry import _pixel_rays

    h, w = depth.shape
    flat = depth.ravel()
    valid = np.flatnonzero(flat > 0)
    out = np.zeros(h * w)
    if valid.size == 0:
        return out.reshape(h, w)

    d = flat[valid]
    rays = _pixel_rays(intrinsics)[:, valid]
    points = (rel_pose.scale * (rel_pose.rotation_matrix() @ rays) / d
              + rel_pose.t[:, None]).T
    front = points[:, 2] > 0
    idx = valid[front]
    points = points[front]
    d_w = 1.0 / points[:, 2]
    jac = _warp_depth_jacobian(points, d_w)
    cov = np.asarray(cov, dtype=np.float64)
    out[idx] = np.maximum(np.einsum("ni,ij,nj->n", jac, cov, jac), 0.0)
    return out.reshape(h, w)


def compose_consistent_variance(cd: ConsistentDepth, v_semi: np.ndarray,
                                v_opt: np.ndarray,
                                semi_valid: np.ndarray | None = None,
                                opt_valid: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel variance selection by source tag.

    Validity masks default to strictly positive variance entries; pass
    the companion depth masks when zero-variance valid pixels can occur.
    Raises MissingVariance if a kept pixel's source map has no value.
    """
    if semi_valid is None:
        semi_valid = v_semi > 0
    if opt_valid is None:
        opt_valid = v_opt > 0

    out = np.zeros_like(cd.depth, dtype=np.float64)
    semi_px = cd.source == SOURCE_SEMI_DENSE
    opt_px = cd.source == SOURCE_DENSIFIED
    if (semi_px & ~semi_valid).any():
        ys, xs = np.nonzero(semi_px & ~semi_valid)
        raise MissingVariance(
            f"semi-dense pixel (x={xs[0]}, y={ys[0]}) has no variance")
    if (opt_px & ~opt_valid).any():
        ys, xs = np.nonzero(opt_px & ~opt_valid)
        raise MissingVariance(
            f"densified pixel (x={xs[0]}, y={ys[0]}) has no variance")
    out[semi_px] = v_semi[semi_px]
    out[opt_px] = v_opt[opt_px]
    return out


# ---------------------------------------------------------------------------
# constraint refinement by direct alignment

def _bilinear_valid_map(depth: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear sampling of a sparse map: a sample is usable only when
    all four neighbouring pixels are valid."""
    h, w = depth.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    ok = (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    corners = (depth[y0c, x0c], depth[y0c, x0c + 1],
               depth[y0c + 1, x0c], depth[y0c + 1, x0c + 1])
    ok &= (corners[0] > 0) & (corners[1] > 0) & (corners[2] > 0) & (corners[3] > 0)
    fx = xs - x0c
    fy = ys - y0c
    top = corners[0] * (1 - fx) + corners[1] * fx
    bot = corners[2] * (1 - fx) + corners[3] * fx
    return np.where(ok, top * (1 - fy) + bot * fy, 0.0), ok


def _alignment_residuals(state, points, intensities, intrinsics, image_j, depth_j):
    """Photometric and inverse-depth residual stack for one pose guess.

    Returns (r_photo, ok_photo, r_depth, ok_depth); entries with ok False
    are zeroed and excluded from weighting by the caller.
    """
    q = state.apply(points)
    front = q[:, 2] > 0
    z = np.where(front, q[:, 2], 1.0)
    u = intrinsics.fx * (q[:, 0] / z) + intrinsics.cx
    v = intrinsics.fy * (q[:, 1] / z) + intrinsics.cy

    sample_i, ok_img = bilinear_sample(image_j, u, v)
    ok_photo = front & ok_img
    r_photo = np.where(ok_photo, sample_i - intensities, 0.0)

    if depth_j is None:
        return r_photo, ok_photo, np.zeros_like(r_photo), np.zeros_like(ok_photo)
    sample_d, ok_d = _bilinear_valid_map(depth_j, u, v)
    ok_depth = ok_photo & ok_d
    r_depth = np.where(ok_depth, 1.0 / z - sample_d, 0.0)
    return r_photo, ok_photo, r_depth, ok_depth


def refine_constraint(image_i: np.ndarray, image_j: np.ndarray,
                      depth_i: np.ndarray, variance_i: np.ndarray,
                      depth_j: np.ndarray | None, init: Sim3Pose, intrinsics, *,
                      huber_thresh: float = 5.0, max_iterations: int = 20,
                      update_tol: float = 1e-7, min_residuals: int = 200,
                      min_variance: float = 1e-6):
    """Refine the relative pose i -> j by Gauss-Newton direct alignment.

    Minimizes Huber-weighted photometric residuals (target intensities
    bilinearly interpolated) plus inverse-depth residuals against the
    target map weighted by 1/variance (floored at min_variance), over the
    source pixels valid in depth_i.  Returns (pose, 7x7 information
    matrix), the information being the final Gauss-Newton normal matrix.

    Raises InsufficientOverlap when fewer than min_residuals usable
    photometric residuals exist at the initial pose, and Diverged when
    the energy increases five iterations in a row.
    """
    from .geometry import _pixel_rays

    h, w = depth_i.shape
    flat = depth_i.ravel()
    valid = np.flatnonzero(flat > 0)
    if valid.size == 0:
        raise InsufficientOverlap("source depth map has no valid pixels")
    d = flat[valid]
    rays = _pixel_rays(intrinsics)[:, valid]
    points = (rays / d).T
    intensities = image_i.ravel()[valid]
    # legitimate zero variances (isolated pixels) must not produce
    # unbounded weights that let single pixels steer the solve
    var = variance_i.ravel()[valid]
    inv_var = 1.0 / np.maximum(var, min_variance)

    depth_huber = 3.0  # in normalized (r/sigma) units

    def energy_and_residuals(state):
        r_p, ok_p, r_d, ok_d = _alignment_residuals(
            state, points, intensities, intrinsics, image_j, depth_j)
        abs_p = np.abs(r_p)
        w_huber = np.where(abs_p <= huber_thresh, 1.0,
                           huber_thresh / np.maximum(abs_p, 1e-12))
        w_photo = w_huber * ok_p
        # depth residuals get the same robustness in normalized units, so
        # a stray gross outlier cannot steer the solve
        chi = np.abs(r_d) * np.sqrt(inv_var)
        w_rob = np.where(chi <= depth_huber, 1.0,
                         depth_huber / np.maximum(chi, 1e-12))
        w_depth = inv_var * w_rob * ok_d
        huber_cost = np.where(
            abs_p <= huber_thresh, r_p * r_p,
            huber_thresh * (2.0 * abs_p - huber_thresh))
        depth_cost = np.where(
            chi <= depth_huber, inv_var * r_d * r_d,
            depth_huber * (2.0 * chi - depth_huber))
        cost = float(np.sum(huber_cost * ok_p) + np.sum(depth_cost * ok_d))
        return cost, r_p, w_photo, r_d, w_depth, int(ok_p.sum())

    state = init
    cost, r_p, w_p, r_d, w_d, n_ok = energy_and_residuals(state)
    if n_ok < min_residuals:
        raise InsufficientOverlap(
            f"only {n_ok} usable residuals at the initial pose")

    information = np.eye(7)
    rises = 0
    fd_step = 1e-6
    for _ in range(max_iterations):
        # numeric Jacobian of the stacked residuals in the local tangent
        jac_p = np.zeros((r_p.size, 7))
        jac_d = np.zeros((r_d.size, 7))
        for k in range(7):
            delta = np.zeros(7)
            delta[k] = fd_step
            plus = _alignment_residuals(compose(state, sim3_exp(delta)),
                                        points, intensities, intrinsics,
                                        image_j, depth_j)
            minus = _alignment_residuals(compose(state, sim3_exp(-delta)),
                                         points, intensities, intrinsics,
                                         image_j, depth_j)
            jac_p[:, k] = (plus[0] - minus[0]) / (2.0 * fd_step)
            jac_d[:, k] = (plus[2] - minus[2]) / (2.0 * fd_step)

        hess = (jac_p.T * w_p) @ jac_p + (jac_d.T * w_d) @ jac_d
        grad = jac_p.T @ (w_p * r_p) + jac_d.T @ (w_d * r_d)
        information = hess
        try:
            step = np.linalg.solve(hess + 1e-9 * np.eye(7), -grad)
        except np.linalg.LinAlgError as exc:
            raise Diverged(f"normal equations singular: {exc}") from exc

        state = compose(state, sim3_exp(step))
        new_cost, r_p, w_p, r_d, w_d, n_ok = energy_and_residuals(state)
        # plateau-level wiggles are not divergence
        rises = rises + 1 if new_cost > cost * (1.0 + 1e-9) else 0
        if rises >= 5:
            raise Diverged("alignment energy increased 5 consecutive iterations")
        cost = new_cost
        if float(np.linalg.norm(step)) < update_tol:
            break

    return state, information


# ---------------------------------------------------------------------------
# pose-graph optimization

def graph_cost(graph: PoseGraph, poses: dict) -> float:
    total = 0.0
    for e in graph.edges:
        r = sim3_log(compose(inverse(e.constraint),
                             compose(inverse(poses[e.i]), poses[e.j])))
        total += float(r @ e.information @ r)
    return total


def _check_connected(graph: PoseGraph, fixed: int):
    ids = [i for i, _ in graph.nodes]
    if fixed not in ids:
        raise DisconnectedGraph(f"fixed node {fixed} is not in the graph")
    adjacency = {i: set() for i in ids}
    for e in graph.edges:
        if e.i not in adjacency or e.j not in adjacency:
            raise DisconnectedGraph(f"edge ({e.i}, {e.j}) references unknown node")
        adjacency[e.i].add(e.j)
        adjacency[e.j].add(e.i)
    seen = {fixed}
    stack = [fixed]
    while stack:
        for nb in adjacency[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(ids):
        raise DisconnectedGraph(
            f"graph has {len(ids)} nodes but only {len(seen)} reachable from {fixed}")


def _edge_residual(e: PoseGraphEdge, poses: dict) -> np.ndarray:
    return sim3_log(compose(inverse(e.constraint),
                            compose(inverse(poses[e.i]), poses[e.j])))


def optimize_pose_graph(graph: PoseGraph, fixed: int, *,
                        max_iterations: int = 100, rel_tol: float = 1e-9,
                        init_damping: float = 1e-4) -> PoseGraph:
    """Levenberg-Marquardt over all non-fixed node poses.

    Minimizes the information-weighted squared norms of the edge
    residuals log(constraint^-1 * pose_i^-1 * pose_j) with node updates
    pose <- pose * exp(delta).  Damping is multiplied by 10 on a rejected
    step and 0.5 on an accepted one; terminates when the relative cost
    change of an accepted step falls below rel_tol.  The fixed node's
    pose object is returned untouched.
    """
    _check_connected(graph, fixed)
    for e in graph.edges:
        info = np.asarray(e.information, dtype=np.float64)
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError(f"edge ({e.i}, {e.j}) information is not symmetric")

    poses = {i: p for i, p in graph.nodes}
    free_ids = [i for i, _ in graph.nodes if i != fixed]
    index = {node_id: k for k, node_id in enumerate(free_ids)}
    n_params = 7 * len(free_ids)
    if n_params == 0 or not graph.edges:
        return PoseGraph(nodes=list(graph.nodes), edges=list(graph.edges))

    fd_step = 1e-7
    damping = init_damping
    cost = graph_cost(graph, poses)

    for _ in range(max_iterations):
        hess = np.zeros((n_params, n_params))
        grad = np.zeros(n_params)
        for e in graph.edges:
            cols = []
            if e.i in index:
                cols.append((e.i, index[e.i]))
            if e.j in index:
                cols.append((e.j, index[e.j]))
            if not cols:
                continue
            r0 = _edge_residual(e, poses)
            jac = np.zeros((7, 7 * len(cols)))
            for c, (node_id, _) in enumerate(cols):
                base = poses[node_id]
                for k in range(7):
                    delta = np.zeros(7)
                    delta[k] = fd_step
                    poses[node_id] = compose(base, sim3_exp(delta))
                    r_plus = _edge_residual(e, poses)
                    poses[node_id] = compose(base, sim3_exp(-delta))
                    r_minus = _edge_residual(e, poses)
                    jac[:, 7 * c + k] = (r_plus - r_minus) / (2.0 * fd_step)
                poses[node_id] = base
            info_jac = e.information @ jac
            block_h = jac.T @ info_jac
            block_g = jac.T @ (e.information @ r0)
            for a, (_, ka) in enumerate(cols):
                grad[7 * ka:7 * ka + 7] += block_g[7 * a:7 * a + 7]
                for b, (_, kb) in enumerate(cols):
                    hess[7 * ka:7 * ka + 7, 7 * kb:7 * kb + 7] += \
                        block_h[7 * a:7 * a + 7, 7 * b:7 * b + 7]

        accepted = False
        for _ in range(25):
            lhs = hess + damping * np.diag(np.maximum(np.diag(hess), 1e-12))
            try:
                step = np.linalg.solve(lhs, -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = dict(poses)
            for node_id, k in index.items():
                trial[node_id] = compose(poses[node_id], sim3_exp(step[7 * k:7 * k + 7]))
            trial_cost = graph_cost(graph, trial)
            if trial_cost <= cost:
                improved = cost - trial_cost
                poses = trial
                damping *= 0.5
                accepted = True
                converged = improved < rel_tol * max(cost, 1e-300)
                cost = trial_cost
                break
            damping *= 10.0
        if not accepted or converged or cost == 0.0:
            break

    nodes = [(i, p) if i == fixed else (i, poses[i]) for i, p in graph.nodes]
    return PoseGraph(nodes=nodes, edges=list(graph.edges))
