"""Bundle directory formats and point-cloud export.

A bundle directory holds a manifest.json plus per-keyframe files:

* float maps as portable-float-map ("Pf") files: header line "Pf",
  dimensions line "width height", a scale line whose sign encodes
  endianness (negative = little-endian), then rows bottom-to-top as
  32-bit floats; round trips are bit-exact,
* poses as single 8-number lines "id tx ty tz qx qy qz qw", where the
  quaternion's squared norm carries the Sim(3) scale (a unit quaternion
  means scale 1, so scale-1 files are plain TUM rows),
* covariances as 7 rows of 7 numbers,
* trajectories in TUM format ("timestamp tx ty tz qx qy qz qw" rows).

Floats in text files are written with repr, which round-trips float64
exactly.  Pipeline results are written into an output directory that is
itself a readable bundle (inputs carried through) plus per-stage maps,
energy traces, the pose graph, trajectories, reports and the effective
config.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import FusionConfig, Intrinsics, Keyframe
from .errors import DataError
from .geometry import Sim3Pose
from .pipeline import KeyframeResult, PipelineResult
from .poserefine import ConsistentDepth, PoseGraph, PoseGraphEdge

MANIFEST_NAME = "manifest.json"


class ParseError(DataError):
    """A bundle file failed to parse (message carries file and position)."""


class MissingFile(DataError):
    """The manifest references a file that does not exist."""


class IoError(DataError):
    """Filesystem-level read or write failure."""


# ---------------------------------------------------------------------------
# portable float maps

def write_pfm(path, arr: np.ndarray):
    """Write a 2-D array as a single-channel PFM (little-endian float32)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PFM writer takes a 2-D array")
    data = arr.astype("<f4")[::-1, :]  # bottom row first
    try:
        with open(path, "wb") as fh:
            fh.write(b"Pf\n")
            fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
            fh.write(b"-1.0\n")
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_header_line(fh, path):
    line = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ParseError(f"{path}: unexpected end of file at byte {fh.tell()}")
        if ch == b"\n":
            return line.decode("ascii", errors="replace")
        line += ch


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a float64 array (top row first)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with fh:
        magic = _read_header_line(fh, path)
        if magic != "Pf":
            raise ParseError(f"{path}: bad magic {magic!r} at byte 0")
        dims = _read_header_line(fh, path)
        try:
            width, height = (int(v) for v in dims.split())
        except ValueError as exc:
            raise ParseError(f"{path}: bad dimensions line {dims!r}") from exc
        scale_line = _read_header_line(fh, path)
        try:
            scale = float(scale_line)
        except ValueError as exc:
            raise ParseError(f"{path}: bad scale line {scale_line!r}") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        offset = fh.tell()
        raw = fh.read(4 * width * height)
        if len(raw) != 4 * width * height:
            raise ParseError(
                f"{path}: truncated pixel data at byte {offset + len(raw)}")
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return data[::-1, :].astype(np.float64)


# ---------------------------------------------------------------------------
# poses, covariances, trajectories

def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def pose_to_numbers(pose: Sim3Pose):
    """7 numbers tx ty tz qx qy qz qw with scale folded into |q|^2."""
    q = pose.quat * np.sqrt(pose.scale)
    return [pose.t[0], pose.t[1], pose.t[2], q[0], q[1], q[2], q[3]]


def pose_from_numbers(values) -> Sim3Pose:
    t = np.asarray(values[:3], dtype=np.float64)
    q = np.asarray(values[3:7], dtype=np.float64)
    norm_sq = float(np.dot(q, q))
    if norm_sq <= 0 or not np.isfinite(norm_sq):
        raise ValueError("quaternion must be nonzero and finite")
    if abs(norm_sq - 1.0) <= 1e-9:
        return Sim3Pose(quat=q, t=t, scale=1.0)
    return Sim3Pose(quat=q / np.sqrt(norm_sq), t=t, scale=norm_sq)


def write_pose_file(path, keyframe_id: int, pose: Sim3Pose):
    with open(path, "w") as fh:
        fh.write(f"{keyframe_id} {_format_floats(pose_to_numbers(pose))}\n")


def read_pose_file(path):
    with open(path) as fh:
        fields = fh.read().split()
    if len(fields) != 8:
        raise ParseError(f"{path}: expected 8 fields, got {len(fields)}")
    try:
        return int(fields[0]), pose_from_numbers([float(v) for v in fields[1:]])
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_covariance(path, cov: np.ndarray):
    cov = np.asarray(cov, dtype=np.float64).reshape(7, 7)
    with open(path, "w") as fh:
        for row in cov:
            fh.write(_format_floats(row) + "\n")


def read_covariance(path) -> np.ndarray:
    with open(path) as fh:
        fields = fh.read().split()
    if len(fields) != 49:
        raise ParseError(f"{path}: expected 49 numbers, got {len(fields)}")
    try:
        return np.array([float(v) for v in fields]).reshape(7, 7)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_trajectory(path, stamped_poses):
    """TUM-format rows; timestamps are written as repr floats."""
    with open(path, "w") as fh:
        for stamp, pose in stamped_poses:
            fh.write(f"{repr(float(stamp))} {_format_floats(pose_to_numbers(pose))}\n")


def read_trajectory(path):
    out = []
    try:
        fh = open(path)
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            try:
                out.append((float(fields[0]),
                            pose_from_numbers([float(v) for v in fields[1:]])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# config files

def write_config(path, cfg: FusionConfig):
    with open(path, "w") as fh:
        for name in cfg.field_names():
            fh.write(f"{name}={repr(getattr(cfg, name))}\n")


def read_config(path, base: FusionConfig | None = None) -> FusionConfig:
    """key=value lines ('#' comments allowed) overriding `base`."""
    overrides = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            overrides[key.strip()] = value.strip()
    try:
        return (base or FusionConfig()).with_overrides(overrides)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# bundles

@dataclass
class Bundle:
    keyframes: list
    intrinsics: Intrinsics
    gt_depths: list | None = None
    gt_trajectory: list | None = None
    loop_edges: list | None = None


def _kf_names(kf_id: int):
    tag = f"{kf_id:03d}"
    return {
        "image": f"image_{tag}.pfm",
        "semi_dense": f"semi_dense_{tag}.pfm",
        "semi_dense_var": f"semi_dense_var_{tag}.pfm",
        "cnn_depth": f"cnn_depth_{tag}.pfm",
        "pose": f"pose_{tag}.txt",
        "pose_cov": f"pose_cov_{tag}.txt",
    }


def write_bundle(bundle: Bundle, out_dir):
    """Write an input-format bundle (manifest + per-keyframe files)."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for kf in bundle.keyframes:
        names = _kf_names(kf.id)
        write_pfm(os.path.join(out_dir, names["image"]), kf.image)
        write_pfm(os.path.join(out_dir, names["semi_dense"]), kf.semi_dense)
        write_pfm(os.path.join(out_dir, names["semi_dense_var"]), kf.semi_dense_var)
        write_pfm(os.path.join(out_dir, names["cnn_depth"]), kf.cnn_depth)
        write_pose_file(os.path.join(out_dir, names["pose"]), kf.id, kf.pose)
        write_covariance(os.path.join(out_dir, names["pose_cov"]), kf.pose_cov)
        entries.append({"id": kf.id, **names})

    manifest = {
        "version": 1,
        "intrinsics": {
            "fx": bundle.intrinsics.fx, "fy": bundle.intrinsics.fy,
            "cx": bundle.intrinsics.cx, "cy": bundle.intrinsics.cy,
            "width": bundle.intrinsics.width, "height": bundle.intrinsics.height,
        },
        "keyframes": entries,
    }
    if bundle.gt_depths is not None:
        gt_names = []
        for kf, gt in zip(bundle.keyframes, bundle.gt_depths):
            name = f"gt_depth_{kf.id:03d}.pfm"
            write_pfm(os.path.join(out_dir, name), gt)
            gt_names.append(name)
        manifest["gt_depths"] = gt_names
    if bundle.gt_trajectory is not None:
        write_trajectory(os.path.join(out_dir, "gt_traj.txt"), bundle.gt_trajectory)
        manifest["gt_trajectory"] = "gt_traj.txt"
    if bundle.loop_edges:
        with open(os.path.join(out_dir, "loop_edges.txt"), "w") as fh:
            for e in bundle.loop_edges:
                row = [e.i, e.j] + pose_to_numbers(e.constraint) \
                    + list(np.asarray(e.information).reshape(49))
                fh.write(" ".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
        manifest["loop_edges"] = "loop_edges.txt"

    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(path):
    if not os.path.exists(path):
        raise MissingFile(f"bundle file missing: {path}")
    return path


def read_bundle(bundle_dir) -> Bundle:
    manifest_path = os.path.join(bundle_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise MissingFile(f"no {MANIFEST_NAME} in {bundle_dir}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: {exc}") from exc

    try:
        intr = manifest["intrinsics"]
        intrinsics = Intrinsics(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"],
                                cy=intr["cy"], width=intr["width"],
                                height=intr["height"])
        entries = manifest["keyframes"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{manifest_path}: missing field {exc}") from exc

    keyframes = []
    ids = []
    for entry in entries:
        kf_id = int(entry["id"])
        ids.append(kf_id)
        pose_id, pose = read_pose_file(_require(os.path.join(bundle_dir, entry["pose"])))
        if pose_id != kf_id:
            raise ParseError(f"{entry['pose']}: pose id {pose_id} != keyframe id {kf_id}")
        keyframes.append(Keyframe(
            id=kf_id,
            image=read_pfm(_require(os.path.join(bundle_dir, entry["image"]))),
            semi_dense=read_pfm(_require(os.path.join(bundle_dir, entry["semi_dense"]))),
            semi_dense_var=read_pfm(
                _require(os.path.join(bundle_dir, entry["semi_dense_var"]))),
            cnn_depth=read_pfm(_require(os.path.join(bundle_dir, entry["cnn_depth"]))),
            pose=pose,
            pose_cov=read_covariance(
                _require(os.path.join(bundle_dir, entry["pose_cov"]))),
        ))
    if len(set(ids)) != len(ids) or ids != sorted(ids):
        raise ParseError(f"{manifest_path}: keyframe ids must be unique and ordered")

    gt_depths = None
    if "gt_depths" in manifest:
        gt_depths = [read_pfm(_require(os.path.join(bundle_dir, name)))
                     for name in manifest["gt_depths"]]
    gt_trajectory = None
    if "gt_trajectory" in manifest:
        gt_trajectory = read_trajectory(
            _require(os.path.join(bundle_dir, manifest["gt_trajectory"])))
    loop_edges = None
    if "loop_edges" in manifest:
        loop_edges = []
        path = _require(os.path.join(bundle_dir, manifest["loop_edges"]))
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                fields = line.split()
                if not fields:
                    continue
                if len(fields) != 2 + 7 + 49:
                    raise ParseError(f"{path}:{lineno}: expected 58 fields")
                values = [float(v) for v in fields[2:]]
                loop_edges.append(PoseGraphEdge(
                    i=int(fields[0]), j=int(fields[1]),
                    constraint=pose_from_numbers(values[:7]),
                    information=np.array(values[7:]).reshape(7, 7)))
    return Bundle(keyframes=keyframes, intrinsics=intrinsics,
                  gt_depths=gt_depths, gt_trajectory=gt_trajectory,
                  loop_edges=loop_edges)


# ---------------------------------------------------------------------------
# pipeline results

def _graph_lines(graph: PoseGraph):
    lines = []
    for node_id, pose in graph.nodes:
        lines.append("node " + str(node_id) + " " + _format_floats(pose_to_numbers(pose)))
    for e in graph.edges:
        row = pose_to_numbers(e.constraint) + list(np.asarray(e.information).reshape(49))
        lines.append(f"edge {e.i} {e.j} " + _format_floats(row))
    return lines


def _parse_graph_lines(lines, path):
    nodes, edges = [], []
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        if fields[0] == "node" and len(fields) == 9:
            nodes.append((int(fields[1]),
                          pose_from_numbers([float(v) for v in fields[2:]])))
        elif fields[0] == "edge" and len(fields) == 3 + 56:
            values = [float(v) for v in fields[3:]]
            edges.append(PoseGraphEdge(
                i=int(fields[1]), j=int(fields[2]),
                constraint=pose_from_numbers(values[:7]),
                information=np.array(values[7:]).reshape(7, 7)))
        else:
            raise ParseError(f"{path}:{lineno}: bad graph line {line!r}")
    return PoseGraph(nodes=nodes, edges=edges)


def write_result(result: PipelineResult, bundle: Bundle, cfg: FusionConfig,
                 out_dir):
    """Write a fuse-output directory: the input bundle plus every stage's
    maps, energy traces, pose graphs, trajectories and the config."""
    write_bundle(bundle, out_dir)
    with open(os.path.join(out_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)

    outputs = []
    for res in result.keyframes:
        tag = f"{res.keyframe_id:03d}"
        names = {
            "cnn_corrected": f"cnn_corrected_{tag}.pfm",
            "filtered": f"filtered_{tag}.pfm",
            "filtered_var": f"filtered_var_{tag}.pfm",
            "dense": f"dense_{tag}.pfm",
            "consistent": f"consistent_{tag}.pfm",
            "consistent_var": f"consistent_var_{tag}.pfm",
            "consistent_src": f"consistent_src_{tag}.pfm",
            "energy_trace": f"energy_trace_{tag}.txt",
            "correction": [res.correction.a, res.correction.b],
        }
        write_pfm(os.path.join(out_dir, names["cnn_corrected"]), res.cnn_corrected)
        write_pfm(os.path.join(out_dir, names["filtered"]), res.filtered_depth)
        write_pfm(os.path.join(out_dir, names["filtered_var"]), res.filtered_variance)
        write_pfm(os.path.join(out_dir, names["dense"]), res.dense)
        write_pfm(os.path.join(out_dir, names["consistent"]), res.consistent.depth)
        write_pfm(os.path.join(out_dir, names["consistent_var"]), res.consistent.variance)
        write_pfm(os.path.join(out_dir, names["consistent_src"]),
                  res.consistent.source.astype(np.float64))
        with open(os.path.join(out_dir, names["energy_trace"]), "w") as fh:
            for k, br in enumerate(res.energy_trace):
                fh.write(f"{k} {repr(br.e_total)} {repr(br.e_cnn_grad)} "
                         f"{repr(br.e_semi_dense)}\n")
        outputs.append({"id": res.keyframe_id, **names})

    manifest["outputs"] = outputs
    manifest["graph_initial"] = "graph_initial.txt"
    with open(os.path.join(out_dir, "graph_initial.txt"), "w") as fh:
        fh.write("\n".join(_graph_lines(result.graph_initial)) + "\n")
    if result.graph_refined is not None:
        manifest["graph_refined"] = "graph_refined.txt"
        with open(os.path.join(out_dir, "graph_refined.txt"), "w") as fh:
            fh.write("\n".join(_graph_lines(result.graph_refined)) + "\n")

    write_trajectory(os.path.join(out_dir, "traj_initial.txt"),
                     [(float(i), p) for i, p in result.graph_initial.nodes])
    manifest["traj_initial"] = "traj_initial.txt"
    final_graph = result.graph_refined or result.graph_initial
    write_trajectory(os.path.join(out_dir, "traj_refined.txt"),
                     [(float(i), p) for i, p in final_graph.nodes])
    manifest["traj_refined"] = "traj_refined.txt"

    write_config(os.path.join(out_dir, "config.txt"), cfg)
    manifest["config"] = "config.txt"

    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_result(result_dir) -> PipelineResult:
    """Rebuild a PipelineResult from a fuse-output directory."""
    from .align import AffineDepthCorrection
    from .densify import EnergyBreakdown

    manifest_path = os.path.join(result_dir, MANIFEST_NAME)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if "outputs" not in manifest:
        raise ParseError(f"{manifest_path}: not a fuse output (no 'outputs')")

    keyframes = []
    for entry in manifest["outputs"]:
        trace = []
        with open(os.path.join(result_dir, entry["energy_trace"])) as fh:
            for line in fh:
                fields = line.split()
                if fields:
                    trace.append(EnergyBreakdown(
                        e_total=float(fields[1]), e_cnn_grad=float(fields[2]),
                        e_semi_dense=float(fields[3])))
        keyframes.append(KeyframeResult(
            keyframe_id=int(entry["id"]),
            correction=AffineDepthCorrection(a=entry["correction"][0],
                                             b=entry["correction"][1]),
            cnn_corrected=read_pfm(os.path.join(result_dir, entry["cnn_corrected"])),
            filtered_depth=read_pfm(os.path.join(result_dir, entry["filtered"])),
            filtered_variance=read_pfm(os.path.join(result_dir, entry["filtered_var"])),
            dense=read_pfm(os.path.join(result_dir, entry["dense"])),
            consistent=ConsistentDepth(
                depth=read_pfm(os.path.join(result_dir, entry["consistent"])),
                variance=read_pfm(os.path.join(result_dir, entry["consistent_var"])),
                source=read_pfm(os.path.join(result_dir, entry["consistent_src"]))
                .astype(np.uint8)),
            energy_trace=trace,
        ))

    with open(os.path.join(result_dir, manifest["graph_initial"])) as fh:
        graph_initial = _parse_graph_lines(fh.read().splitlines(),
                                           manifest["graph_initial"])
    graph_refined = None
    if "graph_refined" in manifest:
        with open(os.path.join(result_dir, manifest["graph_refined"])) as fh:
            graph_refined = _parse_graph_lines(fh.read().splitlines(),
                                               manifest["graph_refined"])
    return PipelineResult(keyframes=keyframes, graph_initial=graph_initial,
                          graph_refined=graph_refined)


# ---------------------------------------------------------------------------
# point clouds

def export_ply(depth: np.ndarray, image: np.ndarray, pose: Sim3Pose,
               intrinsics, path, append_to=None):
    """Back-project a map's valid pixels into world space as an ASCII PLY.

    One vertex per valid pixel, gray value replicated into RGB.  When
    `append_to` is a list, vertices are collected there instead of
    writing a file (used to merge several keyframes into one cloud).
    """
    ys, xs = np.nonzero(depth > 0)
    d = depth[ys, xs]
    rays = np.stack([(xs - intrinsics.cx) / intrinsics.fx,
                     (ys - intrinsics.cy) / intrinsics.fy,
                     np.ones(xs.size)], axis=1)
    points = pose.apply(rays / d[:, None])
    grays = np.clip(np.rint(image[ys, xs]), 0, 255).astype(int)
    vertices = [(p[0], p[1], p[2], g) for p, g in zip(points, grays)]
    if append_to is not None:
        append_to.extend(vertices)
        return
    write_ply(path, vertices)


def write_ply(path, vertices):
    try:
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(vertices)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write("end_header\n")
            for x, y, z, gray in vertices:
                fh.write(f"{repr(float(x))} {repr(float(y))} {repr(float(z))} "
                         f"{gray} {gray} {gray}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
