"""Shared domain types and conventions for the depth-fusion back-end.

Maps are plain 2-D numpy arrays of shape (height, width):

* gray images hold intensities in [0, 255] (not normalized; the intensity
  kernel bandwidth is calibrated to that range),
* inverse-depth maps hold 1/meters, with exactly 0.0 marking an invalid
  pixel (readers normalize NaN to 0 on ingestion),
* variance maps hold (1/m)^2 and share their companion depth map's valid
  set; a valid pixel may legitimately carry zero variance.

Pixel coordinates are (x, y) = (column, row); array access is [y, x].
Pose covariances live in tangent-space coordinates ordered
(translation x3, rotation x3, log-scale x1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DataError, FusionError, NumericError  # noqa: F401  (re-exported)
from .geometry import Sim3Pose


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model: focal lengths, principal point, image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie strictly inside the image")


@dataclass(frozen=True)
class FusionConfig:
    """Every tunable of the fusion pipeline, with calibrated defaults.

    Kernel bandwidths sigma_s (intensity), sigma_d (pixel distance),
    sigma_c (depth-ratio consistency) and sigma_u (uncertainty) drive the
    adaptive filter; gamma is the re-estimated-variance rejection
    threshold and window_radius the half-width of its square window.
    lam weighs the semi-dense data term against the gradient term in the
    densification energy; epsilon and alpha parameterize the robust
    penalty (y + epsilon^2)^alpha; iterations and step_size drive the
    adaptive-moment descent.  tau_e is the two-view consistency threshold
    in inverse depth, and min_inverse_depth the positivity clamp floor.

    beta is accepted for config-file compatibility but currently unused
    by any stage.
    """

    sigma_s: float = 76.5
    sigma_d: float = 2.0
    sigma_c: float = 0.3
    sigma_u: float = 2.0
    gamma: float = 0.0025
    beta: float = 1.1
    window_radius: int = 2
    lam: float = 0.003
    epsilon: float = 0.001
    alpha: float = 0.45
    iterations: int = 30
    step_size: float = 0.05
    tau_e: float = 0.001
    min_inverse_depth: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_s", "sigma_d", "sigma_c", "sigma_u"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.window_radius < 0:
            raise ValueError("window_radius must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.tau_e <= 0:
            raise ValueError("tau_e must be positive")
        if self.min_inverse_depth <= 0:
            raise ValueError("min_inverse_depth must be positive")

    # "lambda" is the natural config-file key but a reserved word in Python.
    _ALIASES = {"lambda": "lam"}

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def with_overrides(self, overrides: dict) -> "FusionConfig":
        """Return a copy with string-keyed overrides applied (values parsed)."""
        parsed = {}
        for key, value in overrides.items():
            name = self._ALIASES.get(key, key)
            if name not in self.field_names():
                raise KeyError(f"unknown config key: {key}")
            kind = type(getattr(self, name))
            parsed[name] = kind(value)
        return replace(self, **parsed)


@dataclass
class Keyframe:
    """One keyframe: image, semi-dense inverse depth + variance, predicted
    relative depth, pose and its 7x7 tangent-space covariance."""

    id: int
    image: np.ndarray
    semi_dense: np.ndarray
    semi_dense_var: np.ndarray
    cnn_depth: np.ndarray
    pose: Sim3Pose
    pose_cov: np.ndarray = field(default_factory=lambda: np.zeros((7, 7)))


def valid_mask(depth: np.ndarray) -> np.ndarray:
    """Boolean mask of valid pixels (strictly positive inverse depth)."""
    return depth > 0


def normalize_invalid(depth: np.ndarray) -> np.ndarray:
    """Return a copy with NaN and negative entries replaced by the invalid
    sentinel 0.0 (ingestion normalization)."""
    out = np.array(depth, dtype=np.float64, copy=True)
    bad = ~np.isfinite(out) | (out < 0)
    out[bad] = 0.0
    return out


def _map_violations(name: str, arr: np.ndarray, shape) -> list[str]:
    out = []
    if arr.shape != shape:
        out.append(f"{name}: shape {arr.shape} != image shape {shape}")
        return out
    nonfinite = ~np.isfinite(arr)
    if nonfinite.any():
        ys, xs = np.nonzero(nonfinite)
        out.append(f"{name}: non-finite value at pixel (x={xs[0]}, y={ys[0]}) "
                   f"and {len(xs) - 1} more")
    negative = np.isfinite(arr) & (arr < 0)
    if negative.any():
        ys, xs = np.nonzero(negative)
        out.append(f"{name}: negative value {arr[ys[0], xs[0]]} at pixel "
                   f"(x={xs[0]}, y={ys[0]}) and {len(xs) - 1} more")
    return out


def validate_keyframe(kf: Keyframe) -> list[str]:
    """Check every keyframe invariant; returns one message per violation.

    An empty list means the keyframe is accepted by every downstream
    operation.  Violations are data, not failures: nothing raises and the
    keyframe is not modified.
    """
    violations: list[str] = []
    shape = kf.image.shape
    if kf.image.ndim != 2:
        return [f"image: expected 2-D array, got ndim={kf.image.ndim}"]

    if not np.isfinite(kf.image).all():
        violations.append("image: non-finite intensity")
    else:
        if kf.image.min() < 0 or kf.image.max() > 255:
            violations.append(
                f"image: intensity outside [0, 255] (min {kf.image.min()}, max {kf.image.max()})")

    violations += _map_violations("semi_dense", kf.semi_dense, shape)
    violations += _map_violations("semi_dense_var", kf.semi_dense_var, shape)
    violations += _map_violations("cnn_depth", kf.cnn_depth, shape)

    if kf.semi_dense.shape == shape and kf.semi_dense_var.shape == shape:
        depth_valid = valid_mask(kf.semi_dense)
        var_stray = ~depth_valid & (kf.semi_dense_var != 0)
        if var_stray.any():
            ys, xs = np.nonzero(var_stray)
            violations.append(
                f"semi_dense_var: nonzero variance at invalid depth pixel "
                f"(x={xs[0]}, y={ys[0]}) and {len(xs) - 1} more")

    cov = np.asarray(kf.pose_cov, dtype=np.float64)
    if cov.shape != (7, 7):
        violations.append(f"pose_cov: shape {cov.shape} != (7, 7)")
    else:
        if not np.allclose(cov, cov.T, atol=1e-9):
            violations.append("pose_cov: not symmetric within 1e-9")
        else:
            eigmin = float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).min())
            if eigmin < -1e-9:
                violations.append(f"pose_cov: not positive semidefinite (min eigenvalue {eigmin})")

    return violations
