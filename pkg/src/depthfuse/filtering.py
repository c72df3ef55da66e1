"""Structure-preserving adaptive filtering of semi-dense inverse-depth maps.

A weighted-average smoother over a square window whose weights multiply
four kernels: photometric similarity (w_s), pixel distance (w_d),
consistency of depth ratios between the semi-dense map and the corrected
prediction (w_c), and depth uncertainty (w_u).  After filtering, the
per-pixel variance is re-estimated from the weighted squared deviations
inside the window, pixels whose re-estimated variance reaches the
threshold gamma are invalidated, and the surviving variances can be
rescaled so that their mean matches the pre-filter mean.

Neighbours invalid in either the semi-dense or the corrected prediction
map are skipped entirely; the output valid set is always a subset of the
input's.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import FusionConfig, Keyframe


class ZeroMeanVariance(RuntimeWarning):
    """Filtered variance mean is zero; rescaling would divide by zero."""


@dataclass(frozen=True)
class FilterWeights:
    """The four multiplicative kernel values, each in (0, 1]."""

    w_s: float
    w_d: float
    w_c: float
    w_u: float

    @property
    def product(self) -> float:
        return self.w_s * self.w_d * self.w_c * self.w_u


def kernel_weights(center, neighbor, kf: Keyframe, cnn_corrected: np.ndarray,
                   cfg: FusionConfig) -> FilterWeights:
    """Kernel values between a valid center pixel and a valid neighbour.

    Both pixels are (x, y) and must be valid in the semi-dense map and in
    the corrected prediction; enforcing that is the caller's job.
    """
    cx, cy = center
    nx, ny = neighbor
    iv_c = kf.image[cy, cx]
    iv_n = kf.image[ny, nx]
    d_c = kf.semi_dense[cy, cx]
    d_n = kf.semi_dense[ny, nx]
    c_c = cnn_corrected[cy, cx]
    c_n = cnn_corrected[ny, nx]

    w_s = np.exp(-((iv_c - iv_n) ** 2) / (2.0 * cfg.sigma_s**2))
    dist2 = float((cx - nx) ** 2 + (cy - ny) ** 2)
    w_d = np.exp(-dist2 / (2.0 * cfg.sigma_d**2))
    ratio_diff = d_c / d_n - c_c / c_n
    w_c = np.exp(-(ratio_diff**2) / (2.0 * cfg.sigma_c**2))
    d_n_floored = max(d_n, cfg.min_inverse_depth)
    w_u = np.exp(-cfg.sigma_u * kf.semi_dense_var[ny, nx] / d_n_floored**4)
    return FilterWeights(w_s=float(w_s), w_d=float(w_d), w_c=float(w_c), w_u=float(w_u))


def _shift(arr: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """out[y, x] = arr[y + dy, x + dx], `fill` outside the frame."""
    h, w = arr.shape
    out = np.full_like(arr, fill, dtype=np.float64)
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = arr[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return out


def adaptive_filter(kf: Keyframe, cnn_corrected: np.ndarray,
                    cfg: FusionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Filter the semi-dense map and re-estimate its variance.

    Returns (depth, variance); pixels whose re-estimated variance is
    >= cfg.gamma come back invalidated, as do centers that were invalid
    on input.  Windows are (2*window_radius + 1)^2, summed in a fixed
    row-major offset order so results do not depend on execution layout.
    """
    image = kf.image.astype(np.float64, copy=False)
    depth = kf.semi_dense.astype(np.float64, copy=False)
    var = kf.semi_dense_var.astype(np.float64, copy=False)
    cnn = np.asarray(cnn_corrected, dtype=np.float64)

    center_valid = (depth > 0) & (cnn > 0)
    r = cfg.window_radius
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    inv_2ss = 1.0 / (2.0 * cfg.sigma_s**2)
    inv_2sd = 1.0 / (2.0 * cfg.sigma_d**2)
    inv_2sc = 1.0 / (2.0 * cfg.sigma_c**2)

    weights = []
    neighbor_depths = []
    weight_sum = np.zeros_like(depth)
    value_sum = np.zeros_like(depth)
    n_valid = np.zeros_like(depth)

    for dy, dx in offsets:
        d_n = _shift(depth, dy, dx)
        c_n = _shift(cnn, dy, dx)
        ok = center_valid & (d_n > 0) & (c_n > 0)
        i_n = _shift(image, dy, dx)
        v_n = _shift(var, dy, dx)

        d_n_safe = np.where(ok, d_n, 1.0)
        c_n_safe = np.where(ok, c_n, 1.0)
        w_s = np.exp(-((image - i_n) ** 2) * inv_2ss)
        w_d = np.exp(-(dy * dy + dx * dx) * inv_2sd)
        ratio_diff = depth / d_n_safe - cnn / c_n_safe
        w_c = np.exp(-(ratio_diff**2) * inv_2sc)
        d_n_floored = np.maximum(d_n_safe, cfg.min_inverse_depth)
        w_u = np.exp(-cfg.sigma_u * v_n / d_n_floored**4)

        w = np.where(ok, w_s * w_d * w_c * w_u, 0.0)
        weights.append(w)
        neighbor_depths.append(d_n)
        weight_sum += w
        value_sum += w * d_n
        n_valid += ok

    safe_weight_sum = np.where(weight_sum > 0, weight_sum, 1.0)
    filtered = np.where(center_valid, value_sum / safe_weight_sum, 0.0)

    # average of squared deviations of the window's original values from
    # the filtered center, per-neighbour weighted, corrected by the ratio
    # of window size to valid-neighbour count
    dev_sum = np.zeros_like(depth)
    for w, d_n in zip(weights, neighbor_depths):
        dev_sum += w * (filtered - d_n) ** 2
    n_valid_safe = np.where(n_valid > 0, n_valid, 1.0)
    window_size = float(len(offsets))
    variance = np.where(
        center_valid,
        (window_size / n_valid_safe) * dev_sum / safe_weight_sum,
        0.0,
    )

    keep = center_valid & (variance < cfg.gamma)
    return np.where(keep, filtered, 0.0), np.where(keep, variance, 0.0)


def rescale_variance(v_filtered: np.ndarray, v_original: np.ndarray,
                     filtered_valid: np.ndarray | None = None,
                     original_valid: np.ndarray | None = None) -> np.ndarray:
    """Scale the filtered variances so their mean matches the original mean.

    Valid sets default to strictly positive entries; pass the companion
    depth masks when zero-variance valid pixels are possible.  If the
    filtered mean is zero the input is returned unchanged and a
    ZeroMeanVariance warning is emitted.
    """
    if filtered_valid is None:
        filtered_valid = v_filtered > 0
    if original_valid is None:
        original_valid = v_original > 0
    if not filtered_valid.any() or not original_valid.any():
        raise ValueError("both variance maps need at least one valid pixel")

    mean_filtered = float(v_filtered[filtered_valid].mean())
    mean_original = float(v_original[original_valid].mean())
    if mean_filtered == 0.0:
        warnings.warn("filtered variance mean is zero; skipping rescale",
                      ZeroMeanVariance)
        return v_filtered.copy()

    out = np.zeros_like(v_filtered, dtype=np.float64)
    out[filtered_valid] = v_filtered[filtered_valid] * (mean_original / mean_filtered)
    return out
