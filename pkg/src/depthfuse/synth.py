"""Deterministic synthetic scenes with exact depth ground truth.

Scenes are textured rectangles and boxes rendered by ray casting, so
every pixel's depth has a closed form and the renderer can serve as an
oracle for the whole pipeline.  Procedural textures (checkerboard plus a
band-limited sum of cosines) produce both high-gradient and textureless
regions.  On top of the ground truth, two simulators produce the
pipeline's inputs: a semi-dense observation (valid only at high image
gradient, with multiplicative inlier noise and scaled outliers whose
variance is deliberately underestimated) and a dense relative-depth
prediction (affinely distorted plus a smooth multiplicative error field).

All randomness flows through the Philox4x64-10 counter-based generator
as shipped in numpy, keyed by (seed, stream) pairs listed below; draws
are whole-frame arrays in row-major order, so identical inputs give
bit-identical outputs on any platform.  Per-frame seeds derive from the
scene seed as (seed + 0x9E3779B97F4A7C15 * (frame + 1)) mod 2^64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Intrinsics, Keyframe
from .errors import DataError
from .geometry import Sim3Pose, compose, inverse, sim3_exp

# Philox stream tags
_STREAM_TEXTURE = 101
_STREAM_SEMI_NOISE = 1
_STREAM_OUTLIER = 2
_STREAM_CNN_FIELD = 3

_FRAME_SEED_STEP = 0x9E3779B97F4A7C15  # splitmix64 increment


class EmptyView(DataError):
    """A camera in the trajectory sees no surface at all."""


def frame_seed(seed: int, frame: int) -> int:
    return (seed + _FRAME_SEED_STEP * (frame + 1)) % (1 << 64)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed % (1 << 64), stream],
                                                             dtype=np.uint64)))


@dataclass(frozen=True)
class Surface:
    """A textured rectangle ('plane', z=0 in local frame, half extents
    (hu, hv)) or box (axis-aligned in local frame, half extents
    (hx, hy, hz)); pose maps local to world."""

    kind: str
    pose: Sim3Pose
    extent: tuple
    texture: int = 0

    def __post_init__(self):
        if self.kind not in ("plane", "box"):
            raise ValueError(f"unknown surface kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    surfaces: tuple
    trajectory: tuple
    intrinsics: Intrinsics
    seed: int

    def __post_init__(self):
        if len(self.surfaces) < 1:
            raise ValueError("scene needs at least one surface")
        if len(self.trajectory) < 2:
            raise ValueError("trajectory needs at least two poses")


@dataclass(frozen=True)
class NoiseModel:
    gradient_threshold: float = 2.0
    inlier_sigma: float = 0.05
    outlier_fraction: float = 0.10
    outlier_scale: float = 5.0
    outlier_patch_radius: int = 12
    outlier_jitter: float = 0.2
    cnn_a: float = 2.0
    cnn_b: float = 0.1
    cnn_smooth_sigma: float = 16.0
    cnn_lowfreq_amp: float = 0.25

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.outlier_patch_radius < 0:
            raise ValueError("outlier_patch_radius must be nonnegative")


# ---------------------------------------------------------------------------
# procedural texture

@dataclass(frozen=True)
class _Texture:
    checker_size: float
    lo: float
    hi: float
    freqs: np.ndarray   # (k, 2) cycles per meter
    phases: np.ndarray  # (k,)
    amps: np.ndarray    # (k,)

    def intensity(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        cell = (np.floor(u / self.checker_size) + np.floor(v / self.checker_size)) % 2
        base = np.where(cell > 0, self.hi, self.lo)
        wave = np.zeros_like(u)
        for (fu, fv), ph, amp in zip(self.freqs, self.phases, self.amps):
            wave += amp * np.cos(2.0 * np.pi * (fu * u + fv * v) + ph)
        return np.clip(base + wave, 0.0, 255.0)


def _make_texture(scene_seed: int, texture_id: int) -> _Texture:
    """Texture ids below 100 give checkerboard plus waves; ids of 100 and
    above give smooth band-limited waves only (no intensity steps), for
    scenes that need alias-free sub-pixel image structure."""
    rng = _rng(scene_seed, _STREAM_TEXTURE + texture_id)
    n_waves = 6
    if texture_id >= 100:
        return _Texture(
            checker_size=1e6,
            lo=128.0,
            hi=128.0,
            freqs=rng.uniform(0.4, 2.8, size=(n_waves, 2)),
            phases=rng.uniform(0.0, 2.0 * np.pi, size=n_waves),
            amps=rng.uniform(14.0, 26.0, size=n_waves),
        )
    return _Texture(
        checker_size=float(rng.uniform(0.25, 0.45)),
        lo=float(rng.uniform(25.0, 55.0)),
        hi=float(rng.uniform(185.0, 225.0)),
        freqs=rng.uniform(0.5, 3.0, size=(n_waves, 2)),
        phases=rng.uniform(0.0, 2.0 * np.pi, size=n_waves),
        amps=rng.uniform(5.0, 12.0, size=n_waves),
    )


# ---------------------------------------------------------------------------
# ray casting

def _intersect_plane(origin_l, dirs_l, extent):
    """Ray-plane hits in the surface's local frame; returns (t, u, v) with
    t = +inf where the ray misses."""
    hu, hv = extent
    dz = dirs_l[2]
    t = np.full(dirs_l.shape[1], np.inf)
    moving = np.abs(dz) > 1e-12
    t_hit = np.where(moving, -origin_l[2] / np.where(moving, dz, 1.0), np.inf)
    u = origin_l[0] + t_hit * dirs_l[0]
    v = origin_l[1] + t_hit * dirs_l[1]
    ok = moving & (t_hit > 1e-9) & (np.abs(u) <= hu) & (np.abs(v) <= hv)
    t[ok] = t_hit[ok]
    return t, u, v


def _intersect_box(origin_l, dirs_l, extent):
    """Slab-method ray-box hits in the local frame; texture coordinates
    come from the two local coordinates spanning the entry face."""
    half = np.asarray(extent, dtype=np.float64).reshape(3, 1)
    d = np.where(np.abs(dirs_l) > 1e-12, dirs_l, 1e-12)
    t1 = (-half - origin_l[:, None]) / d
    t2 = (half - origin_l[:, None]) / d
    t_near = np.minimum(t1, t2)
    t_far = np.maximum(t1, t2)
    t_enter = t_near.max(axis=0)
    t_exit = t_far.min(axis=0)
    axis = t_near.argmax(axis=0)
    ok = (t_enter > 1e-9) & (t_enter <= t_exit)

    t = np.where(ok, t_enter, np.inf)
    hit = origin_l[:, None] + t_enter[None, :] * dirs_l
    u = np.choose(axis, [hit[1], hit[2], hit[0]])
    v = np.choose(axis, [hit[2], hit[0], hit[1]])
    return t, u, v


def render(spec: SceneSpec):
    """Ray-cast every trajectory pose.

    Returns a list of (image, inverse_depth, pose) triples; pixels that
    hit no surface get invalid (0) depth and intensity 0.  Raises
    EmptyView if some camera sees no surface at all.
    """
    K = spec.intrinsics
    textures = {s.texture: _make_texture(spec.seed, s.texture) for s in spec.surfaces}

    xs = np.arange(K.width, dtype=np.float64)
    ys = np.arange(K.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    rays = np.stack([(gx.ravel() - K.cx) / K.fx,
                     (gy.ravel() - K.cy) / K.fy,
                     np.ones(gx.size)])

    frames = []
    for cam_index, cam in enumerate(spec.trajectory):
        origin_w = cam.t
        dirs_w = cam.rotation_matrix() @ rays

        best_t = np.full(rays.shape[1], np.inf)
        image = np.zeros(rays.shape[1])
        for surf in spec.surfaces:
            w2l = inverse(surf.pose)
            origin_l = w2l.apply(origin_w)
            dirs_l = (w2l.scale * w2l.rotation_matrix()) @ dirs_w
            if surf.kind == "plane":
                t, u, v = _intersect_plane(origin_l, dirs_l, surf.extent)
            else:
                t, u, v = _intersect_box(origin_l, dirs_l, surf.extent)
            closer = t < best_t
            if closer.any():
                tex = textures[surf.texture].intensity(u[closer], v[closer])
                image[closer] = tex
                best_t[closer] = t[closer]

        hit = np.isfinite(best_t)
        if not hit.any():
            raise EmptyView(f"camera {cam_index} sees no surface")
        # camera-frame depth of origin + t*dirs is t/scale (rays have z=1)
        inv_depth = np.zeros(rays.shape[1])
        inv_depth[hit] = cam.scale / best_t[hit]

        frames.append((image.reshape(K.height, K.width),
                       inv_depth.reshape(K.height, K.width),
                       cam))
    return frames


# ---------------------------------------------------------------------------
# observation simulators

def image_gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(image.astype(np.float64, copy=False))
    return np.hypot(gx, gy)


def simulate_semidense(image: np.ndarray, gt: np.ndarray, nm: NoiseModel,
                       seed: int):
    """Semi-dense observation of a ground-truth inverse-depth map.

    Valid only where the image gradient magnitude exceeds the threshold;
    inliers get multiplicative Gaussian noise, a fraction of valid pixels
    become scaled outliers, and the variance map reports the inlier noise
    level for all valid pixels, outliers included.
    Returns (depth, variance).
    """
    depth, var, _, _ = simulate_semidense_detailed(image, gt, nm, seed)
    return depth, var


def simulate_semidense_detailed(image: np.ndarray, gt: np.ndarray,
                                nm: NoiseModel, seed: int):
    """As simulate_semidense, also returning (inlier_mask, outlier_mask)."""
    if image.shape != gt.shape:
        raise ValueError("image and ground-truth shapes differ")
    valid = (image_gradient_magnitude(image) > nm.gradient_threshold) & (gt > 0)

    noise = _rng(seed, _STREAM_SEMI_NOISE).standard_normal(gt.shape)
    uniform = _rng(seed, _STREAM_OUTLIER).random(gt.shape)
    # Outliers come in square patches (SLAM front-ends fail on whole
    # ambiguous structures, not isolated pixels): seed pixels are drawn so
    # that dilating by the patch radius covers ~outlier_fraction of the
    # valid set.
    r = nm.outlier_patch_radius
    patch_area = (2 * r + 1) ** 2
    seeds = uniform < nm.outlier_fraction / patch_area
    outlier = np.zeros_like(seeds)
    h, w = seeds.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ys, ye = max(0, dy), min(h, h + dy)
            xs, xe = max(0, dx), min(w, w + dx)
            outlier[ys:ye, xs:xe] |= seeds[ys - dy:ye - dy, xs - dx:xe - dx]
    outlier &= valid
    inlier = valid & ~outlier

    depth = np.zeros_like(gt, dtype=np.float64)
    depth[inlier] = gt[inlier] * (1.0 + nm.inlier_sigma * noise[inlier])
    # outlier values scatter around the scaled depth; front-end failures
    # are wrong *and* mutually inconsistent
    depth[outlier] = gt[outlier] * nm.outlier_scale * (
        1.0 + nm.outlier_jitter * noise[outlier])
    depth[valid] = np.maximum(depth[valid], 1e-6)

    var = np.zeros_like(gt, dtype=np.float64)
    var[valid] = (nm.inlier_sigma * gt[valid]) ** 2
    return depth, var, inlier, outlier


def simulate_relative_depth(gt: np.ndarray, nm: NoiseModel, seed: int) -> np.ndarray:
    """Dense relative-depth prediction whose true affine correction is
    (cnn_a, cnn_b), degraded by a smooth bounded multiplicative field."""
    raw = (np.asarray(gt, dtype=np.float64) - nm.cnn_b) / nm.cnn_a
    if nm.cnn_lowfreq_amp != 0.0:
        noise = _rng(seed, _STREAM_CNN_FIELD).standard_normal(gt.shape)
        smooth = gaussian_filter(noise, sigma=nm.cnn_smooth_sigma, mode="reflect")
        peak = np.abs(smooth).max()
        if peak > 0:
            raw = raw * (1.0 + nm.cnn_lowfreq_amp * smooth / peak)
    return np.maximum(raw, 1e-6)


# ---------------------------------------------------------------------------
# the standard bundle

DEFAULT_POSE_COV = np.diag([2.5e-5, 2.5e-5, 2.5e-5, 4e-6, 4e-6, 4e-6, 1e-6])


def standard_intrinsics(width: int = 320, height: int = 240) -> Intrinsics:
    return Intrinsics(fx=260.0, fy=260.0, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, width=width, height=height)


def standard_scene_spec(seed: int = 42, width: int = 320, height: int = 240) -> SceneSpec:
    """Two textured planes and a box, seen by 8 keyframes translating
    sideways with a slow yaw; the fixed reference scene for tests.

    The scene sits at indoor range (2.3-3.7 m).  The backdrop is a
    yaw-tilted wall, giving wide but smooth inverse-depth relief: the
    least-squares scale/shift correction stays well conditioned while
    per-pixel depth slopes stay far below both the filter's variance
    rejection threshold and the two-view rounding budget.  Interior
    surfaces keep their outlines depth-close to the wall so depth
    discontinuities stay small.
    """
    background = Surface(
        kind="plane",
        pose=compose(
            Sim3Pose(t=np.array([0.0, 0.0, 2.9])),
            sim3_exp(np.array([0, 0, 0, 0.0, 0.45, 0.0, 0.0])),
        ),
        extent=(4.6, 2.7),
        texture=100,
    )
    tilted = Surface(
        kind="plane",
        pose=compose(
            Sim3Pose(t=np.array([-0.5, -0.15, 2.5])),
            sim3_exp(np.array([0, 0, 0, 0.0, 0.24, 0.0, 0.0])),
        ),
        extent=(0.55, 0.45),
        texture=101,
    )
    box = Surface(
        kind="box",
        pose=compose(
            Sim3Pose(t=np.array([0.45, 0.25, 2.52])),
            sim3_exp(np.array([0, 0, 0, 0.04, 0.08, 0.02, 0.0])),
        ),
        extent=(0.22, 0.22, 0.22),
        texture=102,
    )

    poses = []
    for i in range(8):
        poses.append(sim3_exp(np.array([
            0.05 * i, 0.006 * i, 0.012 * i,     # sideways with slight drift
            0.0, -0.01 * i, 0.0,                # slow yaw keeps overlap high
            0.0,
        ])))
    return SceneSpec(surfaces=(background, tilted, box),
                     trajectory=tuple(poses),
                     intrinsics=standard_intrinsics(width, height),
                     seed=seed)


def standard_noise_model() -> NoiseModel:
    return NoiseModel()


def make_keyframes(spec: SceneSpec, nm: NoiseModel):
    """Render a scene and simulate all keyframe inputs.

    Returns (keyframes, gt_depths); keyframe poses are the ground-truth
    trajectory poses with the default pose covariance attached.
    """
    keyframes = []
    gt_depths = []
    for i, (image, gt, pose) in enumerate(render(spec)):
        fseed = frame_seed(spec.seed, i)
        semi, var = simulate_semidense(image, gt, nm, fseed)
        cnn = simulate_relative_depth(gt, nm, fseed)
        keyframes.append(Keyframe(
            id=i, image=image, semi_dense=semi, semi_dense_var=var,
            cnn_depth=cnn, pose=pose, pose_cov=DEFAULT_POSE_COV.copy(),
        ))
        gt_depths.append(gt)
    return keyframes, gt_depths


def standard_bundle(seed: int = 42):
    """The fixed reference bundle: standard scene + default noise model."""
    spec = standard_scene_spec(seed=seed)
    return make_keyframes(spec, standard_noise_model())
