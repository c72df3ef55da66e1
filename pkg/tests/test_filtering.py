"""Adaptive filter against a scalar brute-force oracle.

The oracle loops over window pixels and evaluates the four kernels with
plain Python floats, independent of the vectorized shifted-stack path.
"""

import math

import numpy as np
import pytest

from depthfuse import filtering
from depthfuse.core import FusionConfig, Keyframe
from depthfuse.geometry import Sim3Pose


def _keyframe(image, depth, var):
    return Keyframe(id=0, image=image, semi_dense=depth, semi_dense_var=var,
                    cnn_depth=np.ones_like(depth) * 0.3, pose=Sim3Pose(),
                    pose_cov=np.zeros((7, 7)))


def _brute_force_filter(kf, cnn, cfg):
    """Direct per-pixel evaluation of the weighted average, the
    re-estimated variance and the threshold."""
    depth, var, image = kf.semi_dense, kf.semi_dense_var, kf.image
    h, w = depth.shape
    r = cfg.window_radius
    out_d = np.zeros_like(depth)
    out_v = np.zeros_like(depth)
    for y in range(h):
        for x in range(w):
            if depth[y, x] <= 0 or cnn[y, x] <= 0:
                continue
            wsum = 0.0
            vsum = 0.0
            entries = []
            n_valid = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < h and 0 <= nx < w):
                        continue
                    if depth[ny, nx] <= 0 or cnn[ny, nx] <= 0:
                        continue
                    n_valid += 1
                    w_s = math.exp(-((image[y, x] - image[ny, nx]) ** 2)
                                   / (2 * cfg.sigma_s**2))
                    w_d = math.exp(-(dx * dx + dy * dy) / (2 * cfg.sigma_d**2))
                    ratio = depth[y, x] / depth[ny, nx] - cnn[y, x] / cnn[ny, nx]
                    w_c = math.exp(-(ratio**2) / (2 * cfg.sigma_c**2))
                    dfl = max(depth[ny, nx], cfg.min_inverse_depth)
                    w_u = math.exp(-cfg.sigma_u * var[ny, nx] / dfl**4)
                    weight = w_s * w_d * w_c * w_u
                    wsum += weight
                    vsum += weight * depth[ny, nx]
                    entries.append((weight, depth[ny, nx]))
            filtered = vsum / wsum
            dev = sum(wt * (filtered - dn) ** 2 for wt, dn in entries)
            variance = ((2 * r + 1) ** 2 / n_valid) * dev / wsum
            if variance < cfg.gamma:
                out_d[y, x] = filtered
                out_v[y, x] = variance
    return out_d, out_v


def test_kernel_weights_all_one_for_identical_pixels():
    cfg = FusionConfig()
    depth = np.full((5, 5), 0.4)
    kf = _keyframe(np.full((5, 5), 120.0), depth, np.zeros((5, 5)))
    cnn = np.full((5, 5), 0.4)
    weights = filtering.kernel_weights((2, 2), (2, 2), kf, cnn, cfg)
    assert weights.w_s == weights.w_d == weights.w_c == weights.w_u == 1.0
    assert weights.product == 1.0


def test_kernel_distance_weight_matches_scalar_formula():
    cfg = FusionConfig()  # sigma_d = 2
    depth = np.full((5, 5), 0.4)
    kf = _keyframe(np.full((5, 5), 120.0), depth, np.zeros((5, 5)))
    cnn = np.full((5, 5), 0.4)
    weights = filtering.kernel_weights((2, 2), (4, 2), kf, cnn, cfg)
    assert weights.w_d == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert weights.w_d == pytest.approx(0.60653, abs=1e-5)


def test_kernel_zero_variance_gives_unit_uncertainty_weight():
    cfg = FusionConfig()
    depth = np.full((3, 3), 0.01)  # far points, but variance is zero
    kf = _keyframe(np.full((3, 3), 10.0), depth, np.zeros((3, 3)))
    weights = filtering.kernel_weights((1, 1), (0, 0), kf, np.full((3, 3), 0.01), cfg)
    assert weights.w_u == 1.0


def test_constant_patch_is_a_fixed_point():
    cfg = FusionConfig()
    depth = np.full((7, 7), 0.5)
    kf = _keyframe(np.full((7, 7), 100.0), depth, np.zeros((7, 7)))
    out_d, out_v = filtering.adaptive_filter(kf, np.full((7, 7), 0.5), cfg)
    assert np.allclose(out_d, 0.5, atol=1e-15)
    assert np.allclose(out_v, 0.0, atol=1e-15)
    assert (out_d > 0).all()  # 0 < gamma, everything retained


def test_outlier_neighbor_is_suppressed():
    cfg = FusionConfig()
    depth = np.full((5, 5), 0.2)
    depth[1, 3] = 1.0  # 5x inverse-depth outlier near the center
    var = np.full((5, 5), 1e-5)
    kf = _keyframe(np.full((5, 5), 100.0), depth, var)
    cnn = np.full((5, 5), 0.2)
    out_d, out_v = filtering.adaptive_filter(kf, cnn, cfg)
    assert out_d[2, 2] > 0  # retained by the variance threshold
    assert abs(out_d[2, 2] - 0.2) / 0.2 < 0.01  # center within 1% of inliers
    expected_d, expected_v = _brute_force_filter(kf, cnn, cfg)
    assert np.allclose(out_d, expected_d, atol=1e-12, rtol=0)
    assert np.allclose(out_v, expected_v, atol=1e-12, rtol=0)


def test_isolated_pixel_passes_through_with_zero_variance():
    cfg = FusionConfig()
    depth = np.zeros((9, 9))
    depth[4, 4] = 0.7
    var = np.zeros((9, 9))
    var[4, 4] = 1e-4
    kf = _keyframe(np.full((9, 9), 50.0), depth, var)
    out_d, out_v = filtering.adaptive_filter(kf, np.full((9, 9), 0.7), cfg)
    assert out_d[4, 4] == 0.7
    assert out_v[4, 4] == 0.0


def test_random_map_matches_brute_force_oracle():
    cfg = FusionConfig()
    rng = np.random.default_rng(77)
    h, w = 14, 12
    depth = np.zeros((h, w))
    mask = rng.random((h, w)) < 0.6
    depth[mask] = rng.uniform(0.2, 0.6, mask.sum())
    var = np.zeros((h, w))
    var[mask] = rng.uniform(1e-6, 1e-3, mask.sum())
    image = rng.uniform(0, 255, (h, w))
    cnn = rng.uniform(0.2, 0.6, (h, w))
    kf = _keyframe(image, depth, var)
    out_d, out_v = filtering.adaptive_filter(kf, cnn, cfg)
    expected_d, expected_v = _brute_force_filter(kf, cnn, cfg)
    assert np.allclose(out_d, expected_d, atol=1e-12, rtol=0)
    assert np.allclose(out_v, expected_v, atol=1e-12, rtol=0)


def test_filtered_values_stay_inside_window_range_and_valid_set_shrinks():
    cfg = FusionConfig()
    rng = np.random.default_rng(13)
    h, w = 20, 24
    depth = np.zeros((h, w))
    mask = rng.random((h, w)) < 0.5
    depth[mask] = rng.uniform(0.1, 1.0, mask.sum())
    var = np.where(depth > 0, 1e-4, 0.0)
    kf = _keyframe(rng.uniform(0, 255, (h, w)), depth, var)
    cnn = rng.uniform(0.1, 1.0, (h, w))
    out_d, out_v = filtering.adaptive_filter(kf, cnn, cfg)

    assert ((out_d > 0) <= (depth > 0)).all()  # never creates depth
    assert (out_v >= 0).all()
    r = cfg.window_radius
    for y, x in zip(*np.nonzero(out_d > 0)):
        window = depth[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
        vals = window[(window > 0)]
        assert vals.min() - 1e-12 <= out_d[y, x] <= vals.max() + 1e-12


def test_rescale_variance_identity_and_undo():
    rng = np.random.default_rng(2)
    v = np.zeros((6, 6))
    mask = rng.random(v.shape) < 0.5
    v[mask] = rng.uniform(1e-5, 1e-3, mask.sum())
    assert np.allclose(filtering.rescale_variance(v.copy(), v), v, atol=1e-18)
    doubled = 2.0 * v
    assert np.allclose(filtering.rescale_variance(doubled, v), v, atol=1e-18)


def test_rescale_variance_matches_target_mean():
    rng = np.random.default_rng(3)
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    ma = rng.random(a.shape) < 0.7
    mb = rng.random(b.shape) < 0.4
    a[ma] = rng.uniform(1e-5, 1e-2, ma.sum())
    b[mb] = rng.uniform(1e-5, 1e-2, mb.sum())
    out = filtering.rescale_variance(a, b)
    assert out[ma].mean() == pytest.approx(b[mb].mean(), abs=1e-12)


def test_rescale_variance_zero_mean_warns_and_returns_input():
    v_f = np.zeros((4, 4))
    v_o = np.zeros((4, 4))
    v_o[0, 0] = 1e-4
    filtered_valid = np.zeros((4, 4), dtype=bool)
    filtered_valid[1, 1] = True  # valid pixel with legitimate zero variance
    with pytest.warns(filtering.ZeroMeanVariance):
        out = filtering.rescale_variance(v_f, v_o, filtered_valid, v_o > 0)
    assert np.array_equal(out, v_f)


def test_filter_does_not_mutate_inputs():
    cfg = FusionConfig()
    depth = np.full((5, 5), 0.4)
    var = np.full((5, 5), 1e-4)
    image = np.full((5, 5), 90.0)
    kf = _keyframe(image, depth, var)
    cnn = np.full((5, 5), 0.4)
    snap = [arr.copy() for arr in (depth, var, image, cnn)]
    filtering.adaptive_filter(kf, cnn, cfg)
    for arr, before in zip((depth, var, image, cnn), snap):
        assert np.array_equal(arr, before)
