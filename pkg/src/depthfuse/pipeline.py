"""End-to-end per-keyframe orchestration.

For every keyframe: scale/shift-correct the relative depth prediction
against the raw semi-dense map, adaptively filter the semi-dense map
(using the corrected prediction), densify by energy minimization, check
two-view consistency against the previous keyframe, and compose the
consistent variance map.  After all keyframes, consecutive relative-pose
constraints are refined from the consistent depth and the pose graph is
re-optimized once, batch; refined poses are not fed back into
re-densification.

Ablation switches bypass single stages: filter off feeds the raw
semi-dense map and variance to densification; charbonnier off makes the
data penalty quadratic; cnn_depth_term on adds the extra prediction
consistency term; pose_refine off skips constraint refinement and graph
optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import align, filtering
from .core import FusionConfig, Keyframe, validate_keyframe
from .densify import EnergyBreakdown, densify
from .errors import DataError, FusionError
from .geometry import Sim3Pose, compose, identity, inverse
from .poserefine import (ConsistentDepth, PoseGraph, PoseGraphEdge,
                         SOURCE_DENSIFIED, SOURCE_REJECTED, SOURCE_SEMI_DENSE,
                         ViewDepths, compose_consistent_variance,
                         optimize_pose_graph, pose_uncertainty_map,
                         refine_constraint, two_view_consistent)


@dataclass(frozen=True)
class AblationFlags:
    filter: bool = True
    charbonnier: bool = True
    cnn_depth_term: bool = False
    pose_refine: bool = True

    NAMES = ("filter", "charbonnier", "cnn_depth_term", "pose_refine")

    def toggled(self, names) -> "AblationFlags":
        unknown = set(names) - set(self.NAMES)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return replace(self, **{n: not getattr(self, n) for n in set(names)})


@dataclass
class KeyframeResult:
    keyframe_id: int
    correction: align.AffineDepthCorrection
    cnn_corrected: np.ndarray
    filtered_depth: np.ndarray
    filtered_variance: np.ndarray
    dense: np.ndarray
    consistent: ConsistentDepth
    energy_trace: list


@dataclass
class PipelineResult:
    keyframes: list
    graph_initial: PoseGraph
    graph_refined: PoseGraph | None


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Snap to float32-representable values so that serialized results
    round-trip bit-exactly."""
    return arr.astype(np.float32).astype(np.float64)


def _initial_graph(keyframes, loop_edges) -> PoseGraph:
    nodes = [(kf.id, kf.pose) for kf in keyframes]
    poses = dict(nodes)
    edges = []
    for a, b in zip(keyframes, keyframes[1:]):
        edges.append(PoseGraphEdge(a.id, b.id,
                                   compose(inverse(a.pose), b.pose), np.eye(7)))
    for edge in loop_edges or []:
        if edge.i not in poses or edge.j not in poses:
            raise DataError(f"loop edge ({edge.i}, {edge.j}) references unknown keyframe")
        edges.append(edge)
    return PoseGraph(nodes=nodes, edges=edges)


def run(keyframes, cfg: FusionConfig, intrinsics,
        flags: AblationFlags = AblationFlags(),
        loop_edges=None) -> PipelineResult:
    """Run the full back-end over an ordered keyframe sequence."""
    if not keyframes:
        raise DataError("bundle contains no keyframes")
    for kf in keyframes:
        violations = validate_keyframe(kf)
        if violations:
            raise DataError(f"keyframe {kf.id} invalid: " + "; ".join(violations))

    results = []
    for kf in keyframes:
        try:
            correction = align.solve_scale_shift(kf.cnn_depth, kf.semi_dense)
            cnn_corrected = align.apply_correction(
                kf.cnn_depth, correction, cfg.min_inverse_depth)

            if flags.filter:
                f_depth, f_var = filtering.adaptive_filter(kf, cnn_corrected, cfg)
                f_var = filtering.rescale_variance(
                    f_var, kf.semi_dense_var,
                    filtered_valid=f_depth > 0,
                    original_valid=kf.semi_dense > 0)
            else:
                f_depth = kf.semi_dense.astype(np.float64, copy=True)
                f_var = kf.semi_dense_var.astype(np.float64, copy=True)

            trace: list[EnergyBreakdown] = []
            dense = densify((f_depth, f_var), cnn_corrected, cfg,
                            use_charbonnier=flags.charbonnier,
                            use_cnn_depth_term=flags.cnn_depth_term,
                            trace=trace)
        except FusionError as exc:
            raise type(exc)(f"keyframe {kf.id}: {exc}") from exc

        results.append(KeyframeResult(
            keyframe_id=kf.id,
            correction=correction,
            cnn_corrected=_quantize(cnn_corrected),
            filtered_depth=_quantize(f_depth),
            filtered_variance=_quantize(f_var),
            dense=_quantize(dense),
            consistent=None,
            energy_trace=trace,
        ))

    # two-view consistency + variance composition (needs neighbours)
    for idx, (kf, res) in enumerate(zip(keyframes, results)):
        cur = ViewDepths(pose=kf.pose, semi=res.filtered_depth, dense=res.dense)
        if idx == 0:
            source = np.where(res.filtered_depth > 0, SOURCE_SEMI_DENSE,
                              np.where(res.dense > 0, SOURCE_DENSIFIED,
                                       SOURCE_REJECTED)).astype(np.uint8)
            cd = ConsistentDepth(
                depth=np.where(source != SOURCE_REJECTED,
                               np.where(res.filtered_depth > 0,
                                        res.filtered_depth, res.dense), 0.0),
                variance=np.zeros_like(res.dense),
                source=source)
            rel = identity()
        else:
            prev_kf, prev_res = keyframes[idx - 1], results[idx - 1]
            prev = ViewDepths(pose=prev_kf.pose, semi=prev_res.filtered_depth,
                              dense=prev_res.dense)
            cd = two_view_consistent(cur, prev, intrinsics, cfg.tau_e)
            rel = compose(inverse(kf.pose), prev_kf.pose)

        v_opt = pose_uncertainty_map(res.dense, rel, kf.pose_cov, intrinsics)
        v_c = compose_consistent_variance(
            cd, res.filtered_variance, v_opt,
            semi_valid=res.filtered_depth > 0,
            opt_valid=res.dense > 0)
        res.consistent = ConsistentDepth(depth=_quantize(cd.depth),
                                         variance=_quantize(v_c),
                                         source=cd.source)

    graph_initial = _initial_graph(keyframes, loop_edges)
    graph_refined = None
    if flags.pose_refine and len(keyframes) > 1:
        refined_edges = []
        for a_idx in range(len(keyframes) - 1):
            kf_a, kf_b = keyframes[a_idx], keyframes[a_idx + 1]
            res_a, res_b = results[a_idx], results[a_idx + 1]
            init = compose(inverse(kf_b.pose), kf_a.pose)  # a -> b
            # alignment anchors on the metrically reliable, two-view
            # verified semi-dense regions; densified regions carry
            # prediction bias that would skew the constraint
            src = np.where(res_a.consistent.source == SOURCE_SEMI_DENSE,
                           res_a.consistent.depth, 0.0)
            tgt = np.where(res_b.consistent.source == SOURCE_SEMI_DENSE,
                           res_b.consistent.depth, 0.0)
            pose_ab, information = refine_constraint(
                kf_a.image, kf_b.image,
                src, res_a.consistent.variance,
                tgt, init, intrinsics)
            # graph edges store the j->i point transform (i observes j)
            refined_edges.append(PoseGraphEdge(kf_a.id, kf_b.id,
                                               inverse(pose_ab), information))
        for edge in (loop_edges or []):
            refined_edges.append(edge)
        graph = PoseGraph(nodes=[(kf.id, kf.pose) for kf in keyframes],
                          edges=refined_edges)
        graph_refined = optimize_pose_graph(graph, fixed=keyframes[0].id)
    elif flags.pose_refine:
        graph_refined = optimize_pose_graph(graph_initial, fixed=keyframes[0].id)

    return PipelineResult(keyframes=results,
                          graph_initial=graph_initial,
                          graph_refined=graph_refined)


def refined_trajectory(result: PipelineResult):
    """(id, pose) pairs after refinement, falling back to the initial
    graph when pose refinement was ablated."""
    graph = result.graph_refined if result.graph_refined is not None \
        else result.graph_initial
    return list(graph.nodes)
