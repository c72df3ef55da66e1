"""Command-line surface.

Subcommands: `synth` renders a synthetic bundle from a scene-spec file
(or the built-in "standard" scene), `fuse` runs the full back-end over a
bundle, `eval` scores a fuse output against ground truth, and
`export-cloud` back-projects densified maps into one PLY point cloud.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, invalid bundles), 3 numeric failure.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bundle_io, metrics, pipeline, synth
from .core import FusionConfig, Intrinsics
from .errors import DataError, FusionError, NumericError
from .geometry import Sim3Pose

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthfuse",
        description="Dense depth-map fusion back-end: semi-dense SLAM depth "
                    "+ relative depth predictions -> dense maps and refined poses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="render a synthetic bundle")
    p_synth.add_argument("--spec", required=True,
                         help="scene-spec JSON file, or 'standard' for the built-in scene")
    p_synth.add_argument("--out", required=True, help="output bundle directory")
    p_synth.add_argument("--seed", type=int, default=42)

    p_fuse = sub.add_parser("fuse", help="run the fusion back-end on a bundle")
    p_fuse.add_argument("--in", dest="in_dir", required=True)
    p_fuse.add_argument("--out", dest="out_dir", required=True)
    p_fuse.add_argument("--config", help="key=value config file")
    p_fuse.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config value")
    p_fuse.add_argument("--ablate", default="",
                        help="comma list of stages to flip from their defaults: "
                             "filter, charbonnier, cnn_depth_term, pose_refine")

    p_eval = sub.add_parser("eval", help="score a fuse output against ground truth")
    p_eval.add_argument("--est", required=True, help="fuse output directory")
    p_eval.add_argument("--gt", required=True, help="bundle directory with ground truth")
    p_eval.add_argument("--scale", default="per_map_ls", choices=["per_map_ls", "none"])

    p_cloud = sub.add_parser("export-cloud", help="export a PLY point cloud")
    p_cloud.add_argument("--in", dest="in_dir", required=True,
                         help="fuse output directory")
    p_cloud.add_argument("--out", dest="out_file", required=True)
    return parser


# ---------------------------------------------------------------------------
# synth

def _pose_from_list(values) -> Sim3Pose:
    if len(values) != 7:
        raise bundle_io.ParseError(f"pose needs 7 numbers, got {len(values)}")
    return bundle_io.pose_from_numbers([float(v) for v in values])


def _scene_from_json(path, seed: int) -> synth.SceneSpec:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise bundle_io.MissingFile(f"cannot open scene spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise bundle_io.ParseError(f"{path}: {exc}") from exc
    try:
        intr = raw["intrinsics"]
        intrinsics = Intrinsics(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"],
                                cy=intr["cy"], width=intr["width"],
                                height=intr["height"])
        surfaces = tuple(
            synth.Surface(kind=s["kind"], pose=_pose_from_list(s["pose"]),
                          extent=tuple(s["extent"]), texture=int(s.get("texture", 0)))
            for s in raw["surfaces"])
        trajectory = tuple(_pose_from_list(p) for p in raw["trajectory"])
    except (KeyError, TypeError, ValueError) as exc:
        raise bundle_io.ParseError(f"{path}: bad scene spec: {exc}") from exc
    return synth.SceneSpec(surfaces=surfaces, trajectory=trajectory,
                           intrinsics=intrinsics, seed=int(raw.get("seed", seed)))


def _cmd_synth(args) -> int:
    if args.spec == "standard" and not os.path.exists(args.spec):
        spec = synth.standard_scene_spec(seed=args.seed)
    else:
        spec = _scene_from_json(args.spec, args.seed)
    keyframes, gt_depths = synth.make_keyframes(spec, synth.standard_noise_model())
    bundle = bundle_io.Bundle(
        keyframes=keyframes,
        intrinsics=spec.intrinsics,
        gt_depths=gt_depths,
        gt_trajectory=[(float(kf.id), kf.pose) for kf in keyframes],
    )
    bundle_io.write_bundle(bundle, args.out)
    print(f"wrote {len(keyframes)} keyframes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse

def _parse_sets(pairs):
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _cmd_fuse(args) -> int:
    cfg = FusionConfig()
    if args.config:
        cfg = bundle_io.read_config(args.config, cfg)
    if args.sets:
        cfg = cfg.with_overrides(_parse_sets(args.sets))

    flags = pipeline.AblationFlags()
    names = [n for n in args.ablate.split(",") if n]
    if names:
        flags = flags.toggled(names)

    bundle = bundle_io.read_bundle(args.in_dir)
    result = pipeline.run(bundle.keyframes, cfg, bundle.intrinsics, flags,
                          loop_edges=bundle.loop_edges)
    bundle_io.write_result(result, bundle, cfg, args.out_dir)

    report_lines = [f"keyframes={len(result.keyframes)}",
                    f"ablation={','.join(n for n in flags.NAMES if getattr(flags, n))}"]
    if bundle.gt_depths is not None:
        report = metrics.depth_report(
            [res.dense for res in result.keyframes], bundle.gt_depths)
        report_lines += _report_lines(report, prefix="dense")
    _write_report(args.out_dir, report_lines)
    print(f"fused {len(result.keyframes)} keyframes into {args.out_dir}")
    return EXIT_OK


def _report_lines(report: metrics.DepthReport, prefix: str):
    lines = [f"{prefix}_percent_correct_mean={repr(report.mean)}",
             f"{prefix}_pixels_evaluated={report.pixels_evaluated}",
             f"{prefix}_scale_mode={report.scale_mode}",
             f"{prefix}_rel_tol={repr(report.rel_tol)}"]
    for k, (percent, scale) in enumerate(zip(report.per_keyframe,
                                             report.scale_factors)):
        lines.append(f"{prefix}_percent_correct_{k:03d}={repr(percent)}")
        lines.append(f"{prefix}_scale_{k:03d}={repr(scale)}")
    return lines


def _write_report(out_dir, lines):
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        for line in lines:
            fh.write(line.replace("=", ": ", 1) + "\n")
    with open(os.path.join(out_dir, "report.kv"), "w") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# eval

def _cmd_eval(args) -> int:
    result = bundle_io.read_result(args.est)
    gt_bundle = bundle_io.read_bundle(args.gt)
    if gt_bundle.gt_depths is None:
        raise DataError(f"{args.gt} carries no ground-truth depth maps")

    by_id = {res.keyframe_id: res for res in result.keyframes}
    gt_ids = [kf.id for kf in gt_bundle.keyframes]
    missing = [i for i in gt_ids if i not in by_id]
    if missing:
        raise DataError(f"estimate lacks keyframes {missing}")

    report = metrics.depth_report(
        [by_id[i].dense for i in gt_ids], gt_bundle.gt_depths,
        scale_mode=args.scale)
    lines = _report_lines(report, prefix="dense")

    if gt_bundle.gt_trajectory is not None:
        graph = result.graph_refined or result.graph_initial
        est_by_id = dict(graph.nodes)
        est_traj = [est_by_id[int(stamp)] for stamp, _ in gt_bundle.gt_trajectory
                    if int(stamp) in est_by_id]
        gt_traj = [pose for stamp, pose in gt_bundle.gt_trajectory
                   if int(stamp) in est_by_id]
        ate_value = metrics.ate(est_traj, gt_traj)
        lines.append(f"ate_rmse={repr(ate_value)}")

    _write_report(args.est, lines)
    for line in lines:
        print(line.replace("=", ": ", 1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-cloud

def _cmd_export_cloud(args) -> int:
    result = bundle_io.read_result(args.in_dir)
    bundle = bundle_io.read_bundle(args.in_dir)
    poses = dict((result.graph_refined or result.graph_initial).nodes)
    vertices = []
    for kf, res in zip(bundle.keyframes, result.keyframes):
        bundle_io.export_ply(res.dense, kf.image, poses[kf.id],
                             bundle.intrinsics, None, append_to=vertices)
    bundle_io.write_ply(args.out_file, vertices)
    print(f"wrote {len(vertices)} vertices to {args.out_file}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    commands = {"synth": _cmd_synth, "fuse": _cmd_fuse, "eval": _cmd_eval,
                "export-cloud": _cmd_export_cloud}
    try:
        return commands[args.command](args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
