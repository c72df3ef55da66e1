"""Reconstruction and trajectory evaluation.

Depth accuracy is the percentage of pixels whose depth (meters, not
inverse depth) has relative error below a tolerance, optionally after a
per-map least-squares scale; trajectory accuracy is the RMSE of
translation residuals after closed-form similarity alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .geometry import Sim3Pose


class NoOverlap(DataError):
    """Estimate and ground truth share no valid pixel."""


class DegenerateTrajectory(NumericError):
    """Trajectory too short or collinear for similarity alignment."""


@dataclass(frozen=True)
class DepthReport:
    """Per-keyframe percent-correct values with their aggregate."""

    per_keyframe: tuple
    mean: float
    pixels_evaluated: int
    scale_factors: tuple
    rel_tol: float
    scale_mode: str


def _pcd_single(est: np.ndarray, gt: np.ndarray, rel_tol: float,
                scale_mode: str):
    both = (est > 0) & (gt > 0)
    n = int(both.sum())
    if n == 0:
        raise NoOverlap("no pixel valid in both maps")
    depth_est = 1.0 / est[both]
    depth_gt = 1.0 / gt[both]
    if scale_mode == "per_map_ls":
        scale = float(np.dot(depth_est, depth_gt) / np.dot(depth_est, depth_est))
    elif scale_mode == "none":
        scale = 1.0
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    correct = np.abs(scale * depth_est - depth_gt) / depth_gt < rel_tol
    return 100.0 * float(correct.mean()), n, scale


def percent_correct_depth(est: np.ndarray, gt: np.ndarray,
                          rel_tol: float = 0.10,
                          scale_mode: str = "per_map_ls") -> float:
    """Percentage of common valid pixels with depth relative error < rel_tol.

    Comparison happens in depth space (1/inverse depth); with
    scale_mode="per_map_ls" the scalar minimizing sum((s*d_est - d_gt)^2)
    is applied first.  Pixels invalid in either map are excluded.
    """
    percent, _, _ = _pcd_single(est, gt, rel_tol, scale_mode)
    return percent


def depth_report(est_maps, gt_maps, rel_tol: float = 0.10,
                 scale_mode: str = "per_map_ls") -> DepthReport:
    """Evaluate a sequence of map pairs; the aggregate is the mean of the
    per-keyframe percentages."""
    if len(est_maps) != len(gt_maps) or not est_maps:
        raise ValueError("need equally many estimate and ground-truth maps")
    percents, pixels, scales = [], 0, []
    for est, gt in zip(est_maps, gt_maps):
        percent, n, scale = _pcd_single(est, gt, rel_tol, scale_mode)
        percents.append(percent)
        pixels += n
        scales.append(scale)
    return DepthReport(per_keyframe=tuple(percents),
                       mean=float(np.mean(percents)),
                       pixels_evaluated=pixels,
                       scale_factors=tuple(scales),
                       rel_tol=rel_tol,
                       scale_mode=scale_mode)


def umeyama_alignment(source: np.ndarray, target: np.ndarray):
    """Closed-form similarity (scale, rotation, translation) minimizing
    sum ||s*R@x + t - y||^2.  Inputs are (N, 3).  Returns (s, R, t)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    ys = target - mu_t

    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateTrajectory("trajectory points are collinear")

    cov = ys.T @ xs / source.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    fix = np.diag([1.0, 1.0, sign if sign != 0 else 1.0])
    rot = u @ fix @ vt
    var_s = float((xs**2).sum() / source.shape[0])
    scale = float(np.trace(np.diag(d) @ fix) / var_s)
    trans = mu_t - scale * rot @ mu_s
    return scale, rot, trans


def ate(traj_est, traj_gt, align: str = "sim3_umeyama") -> float:
    """Root-mean-square translation error after similarity alignment.

    Both trajectories are sequences of poses of equal length >= 3;
    alignment uses the translation components only.  Raises
    DegenerateTrajectory for short or collinear trajectories.
    """
    if align != "sim3_umeyama":
        raise ValueError(f"unknown alignment {align!r}")
    if len(traj_est) != len(traj_gt):
        raise ValueError("trajectories must have equal length")
    if len(traj_est) < 3:
        raise DegenerateTrajectory(f"need at least 3 poses, got {len(traj_est)}")

    xs = np.array([p.t if isinstance(p, Sim3Pose) else np.asarray(p, dtype=np.float64)
                   for p in traj_est])
    ys = np.array([p.t if isinstance(p, Sim3Pose) else np.asarray(p, dtype=np.float64)
                   for p in traj_gt])
    scale, rot, trans = umeyama_alignment(xs, ys)
    residual = (scale * (xs @ rot.T) + trans) - ys
    return float(np.sqrt((residual**2).sum(axis=1).mean()))
