"""Sim(3) group laws, projection round trips, and warping.

Round-trip and group-law oracles are the identities themselves; the warp
is cross-checked against a per-pixel brute-force reprojection written
directly from the pinhole equations.
"""

import math

import numpy as np
import pytest

from depthfuse import geometry as g
from depthfuse.core import Intrinsics

K = Intrinsics(fx=260.0, fy=250.0, cx=159.5, cy=119.5, width=320, height=240)


def _random_tangent(rng, max_angle=np.pi - 1e-2):
    xi = rng.normal(0.0, 0.8, 7)
    angle = np.linalg.norm(xi[3:6])
    if angle >= max_angle:
        xi[3:6] *= (max_angle / angle) * rng.uniform(0.1, 0.99)
    return xi


def test_exp_of_zero_is_identity():
    pose = g.sim3_exp(np.zeros(7))
    assert np.allclose(pose.quat, [0, 0, 0, 1])
    assert np.allclose(pose.t, 0)
    assert pose.scale == 1.0


def test_exp_scale_component_matches_scalar_exp():
    pose = g.sim3_exp(np.array([0, 0, 0, 0, 0, 0, 0.6931]))
    assert abs(pose.scale - math.exp(0.6931)) < 1e-15
    assert abs(pose.scale - 2.0) < 1e-4
    assert np.allclose(pose.t, 0) and np.allclose(pose.quat, [0, 0, 0, 1])


def test_log_inverts_exp_on_1000_samples():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(1000):
        xi = _random_tangent(rng)
        err = np.abs(g.sim3_log(g.sim3_exp(xi)) - xi).max()
        worst = max(worst, err)
    assert worst < 1e-9


def test_log_of_identity_and_pure_scale():
    assert np.allclose(g.sim3_log(g.Sim3Pose()), 0)
    xi = g.sim3_log(g.Sim3Pose(scale=2.0))
    assert np.allclose(xi[:6], 0)
    assert abs(xi[6] - math.log(2.0)) < 1e-15


def test_log_raises_at_angle_cut():
    axis = np.array([1.0, 0.0, 0.0])
    pose = g.sim3_exp(np.concatenate([np.zeros(3), axis * (np.pi - 1e-8), [0.0]]))
    with pytest.raises(g.AngleAtCut):
        g.sim3_log(pose)


def test_compose_identity_and_inverse_laws():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pose = g.sim3_exp(_random_tangent(rng))
        assert g.tangent_distance(g.compose(g.identity(), pose), pose) < 1e-12
        assert g.tangent_distance(g.compose(pose, g.inverse(pose)), g.identity()) < 1e-12


def test_compose_multiplies_scales():
    a = g.Sim3Pose(scale=2.0)
    b = g.Sim3Pose(scale=3.0)
    assert abs(g.compose(a, b).scale - 6.0) < 1e-15


def test_compose_associativity_on_random_triples():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b, c = (g.sim3_exp(_random_tangent(rng) * 0.5) for _ in range(3))
        left = g.compose(g.compose(a, b), c)
        right = g.compose(a, g.compose(b, c))
        assert g.tangent_distance(left, right) < 1e-10


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(7)
    a = g.sim3_exp(_random_tangent(rng) * 0.5)
    b = g.sim3_exp(_random_tangent(rng) * 0.5)
    assert np.allclose(g.compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_backproject_principal_point():
    point = g.backproject((K.cx, K.cy), 0.5, K)
    assert np.allclose(point, [0.0, 0.0, 2.0])


def test_projection_round_trip_1000_pixels():
    rng = np.random.default_rng(88)
    worst = 0.0
    for _ in range(1000):
        pixel = (rng.uniform(0, K.width - 1), rng.uniform(0, K.height - 1))
        d = rng.uniform(0.05, 5.0)
        (u, v), d_out = g.project(g.backproject(pixel, d, K), K)
        worst = max(worst, abs(u - pixel[0]), abs(v - pixel[1]), abs(d_out - d))
    assert worst < 1e-10


def test_project_behind_camera_raises():
    with pytest.raises(g.BehindCamera):
        g.project(np.array([0.0, 0.0, -1.0]), K)
    with pytest.raises(g.BehindCamera):
        g.project(np.array([0.1, 0.1, 0.0]), K)


def test_identity_warp_is_bit_exact():
    rng = np.random.default_rng(3)
    depth = np.zeros((K.height, K.width))
    mask = rng.random(depth.shape) < 0.2
    depth[mask] = rng.uniform(0.05, 2.0, mask.sum())
    warped = g.warp_depth_map(depth, g.identity(), K)
    assert np.array_equal(warped, depth)


def test_on_axis_forward_translation():
    # the camera advances 1 m along the optical axis, so the source-to-
    # destination transform moves points back by 1 m
    depth = np.zeros((K.height, K.width))
    cy, cx = round(K.cy), round(K.cx)
    depth[cy, cx] = 0.5
    warped = g.warp_depth_map(depth, g.Sim3Pose(t=np.array([0, 0, -1.0])), K)
    near_axis = warped[cy - 1:cy + 2, cx - 1:cx + 2]
    assert near_axis.max() == pytest.approx(1.0, abs=1e-12)


def _brute_force_warp(depth, pose, intr):
    out = np.zeros_like(depth)
    h, w = depth.shape
    for y in range(h):
        for x in range(w):
            d = depth[y, x]
            if d <= 0:
                continue
            p = np.array([(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0]) / d
            q = pose.scale * pose.rotation_matrix() @ p + pose.t
            if q[2] <= 0:
                continue
            u = intr.fx * q[0] / q[2] + intr.cx
            v = intr.fy * q[1] / q[2] + intr.cy
            ui, vi = int(np.rint(u)), int(np.rint(v))
            if 0 <= ui < w and 0 <= vi < h:
                d_new = 1.0 / q[2]
                if d_new > out[vi, ui]:
                    out[vi, ui] = d_new
    return out


def test_warp_matches_brute_force_z_buffer():
    small = Intrinsics(fx=50.0, fy=52.0, cx=19.5, cy=14.5, width=40, height=30)
    rng = np.random.default_rng(11)
    depth = np.zeros((small.height, small.width))
    mask = rng.random(depth.shape) < 0.4
    depth[mask] = rng.uniform(0.1, 2.0, mask.sum())
    pose = g.sim3_exp(np.array([0.05, -0.02, 0.1, 0.01, -0.03, 0.02, 0.05]))
    expected = _brute_force_warp(depth, pose, small)
    got = g.warp_depth_map(depth, pose, small)
    assert np.allclose(got, expected, atol=1e-12, rtol=0)


def test_warp_collision_keeps_nearer_point():
    # after pushing points 1 m away, pixel offsets shrink by z/(z+1):
    # offset 54 at z=2 and offset 48 at z=3 both land at offset 36
    intr = Intrinsics(fx=260.0, fy=260.0, cx=160.0, cy=120.0, width=320, height=240)
    depth = np.zeros((intr.height, intr.width))
    depth[120, 160 + 54] = 1.0 / 2.0
    depth[120, 160 + 48] = 1.0 / 3.0
    pose = g.Sim3Pose(t=np.array([0.0, 0.0, 1.0]))
    warped = g.warp_depth_map(depth, pose, intr)
    assert (warped > 0).sum() == 1
    assert warped[120, 160 + 36] == pytest.approx(1.0 / 3.0, rel=1e-12)  # nearer wins


def test_warp_never_invents_points():
    rng = np.random.default_rng(12)
    depth = np.zeros((K.height, K.width))
    mask = rng.random(depth.shape) < 0.1
    depth[mask] = rng.uniform(0.1, 1.0, mask.sum())
    for _ in range(5):
        pose = g.sim3_exp(_random_tangent(rng) * 0.05)
        warped = g.warp_depth_map(depth, pose, K)
        assert (warped > 0).sum() <= (depth > 0).sum()


def test_warp_does_not_mutate_input():
    depth = np.zeros((K.height, K.width))
    depth[50, 50] = 0.5
    before = depth.copy()
    g.warp_depth_map(depth, g.sim3_exp(np.full(7, 0.01)), K)
    assert np.array_equal(depth, before)
