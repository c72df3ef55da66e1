"""Densification energy, analytic gradient, and the optimizer loop.

The energy oracle re-implements both terms with plain Python loops; the
gradient oracle is central finite differences of the energy.
"""

import math

import numpy as np
import pytest

from depthfuse import densify as dn
from depthfuse.core import FusionConfig


def brute_force_energy(d_opt, f_depth, f_var, cnn, cfg, *, use_charbonnier=True,
                       order=None):
    """Loop re-implementation; `order` permutes the data-term summation."""
    h, w = d_opt.shape
    e_grad = 0.0
    for y in range(h):
        for x in range(w):
            gx = math.log(d_opt[y, x + 1]) - math.log(d_opt[y, x]) if x + 1 < w else 0.0
            gy = math.log(d_opt[y + 1, x]) - math.log(d_opt[y, x]) if y + 1 < h else 0.0
            cx = math.log(cnn[y, x + 1]) - math.log(cnn[y, x]) if x + 1 < w else 0.0
            cy = math.log(cnn[y + 1, x]) - math.log(cnn[y, x]) if y + 1 < h else 0.0
            e_grad += ((gx - cx) ** 2 + (gy - cy) ** 2) / (1.0 / cnn[y, x]) ** 2
    e_grad /= h * w

    coords = [(y, x) for y in range(h) for x in range(w) if f_depth[y, x] > 0]
    if order is not None:
        coords = [coords[i] for i in order]
    e_semi = 0.0
    for y, x in coords:
        r = d_opt[y, x] - f_depth[y, x]
        yy = r * r / max(f_var[y, x], dn.VARIANCE_FLOOR)
        if use_charbonnier:
            yy = (yy + cfg.epsilon**2) ** cfg.alpha
        e_semi += yy
    if coords:
        e_semi /= len(coords)
    return e_grad, e_semi


def _instance(rng, h=8, w=8, valid_frac=0.3):
    cnn = rng.uniform(0.2, 0.9, (h, w))
    d = cnn * rng.uniform(0.85, 1.15, (h, w))
    f_depth = np.zeros((h, w))
    mask = rng.random((h, w)) < valid_frac
    f_depth[mask] = rng.uniform(0.2, 0.9, mask.sum())
    f_var = np.zeros((h, w))
    f_var[mask] = rng.uniform(1e-4, 1e-2, mask.sum())
    return d, f_depth, f_var, cnn


def test_charbonnier_at_zero():
    cfg = FusionConfig()
    value = dn.charbonnier(0.0, cfg.epsilon, cfg.alpha)
    assert value == pytest.approx((1e-6) ** 0.45, rel=1e-12)
    assert value == pytest.approx(1.995e-3, abs=5e-6)


def test_charbonnier_monotone_and_sublinear():
    cfg = FusionConfig()
    rho = lambda y: dn.charbonnier(y, cfg.epsilon, cfg.alpha)
    assert rho(1.0) > rho(0.5) > rho(0.0)
    assert rho(100.0) / rho(10.0) < 10.0
    assert rho(100.0) / rho(10.0) == pytest.approx(10**0.45, rel=1e-3)


def test_energy_zero_at_init_with_empty_data_term():
    cfg = FusionConfig()
    rng = np.random.default_rng(0)
    cnn = rng.uniform(0.2, 1.0, (6, 6))
    empty = np.zeros((6, 6))
    br = dn.energy(cnn.copy(), (empty, empty), cnn, cfg)
    assert br.e_total == 0.0 and br.e_cnn_grad == 0.0 and br.e_semi_dense == 0.0


def test_energy_data_term_at_exact_match_is_rho_of_zero():
    cfg = FusionConfig()
    rng = np.random.default_rng(1)
    d, f_depth, f_var, cnn = _instance(rng)
    d_opt = np.where(f_depth > 0, f_depth, cnn)
    br = dn.energy(d_opt, (f_depth, f_var), cnn, cfg)
    assert br.e_semi_dense == pytest.approx((1e-6) ** 0.45, rel=1e-12)


def test_energy_matches_brute_force():
    cfg = FusionConfig()
    rng = np.random.default_rng(2)
    for use_charb in (True, False):
        d, f_depth, f_var, cnn = _instance(rng)
        br = dn.energy(d, (f_depth, f_var), cnn, cfg, use_charbonnier=use_charb)
        e_grad, e_semi = brute_force_energy(d, f_depth, f_var, cnn, cfg,
                                            use_charbonnier=use_charb)
        assert br.e_cnn_grad == pytest.approx(e_grad, abs=1e-12)
        assert br.e_semi_dense == pytest.approx(e_semi, abs=1e-12)
        assert br.e_total == pytest.approx(e_grad + cfg.lam * e_semi, rel=1e-10)


def test_energy_invariant_under_data_term_permutation():
    cfg = FusionConfig()
    rng = np.random.default_rng(3)
    d, f_depth, f_var, cnn = _instance(rng)
    n = int((f_depth > 0).sum())
    _, base = brute_force_energy(d, f_depth, f_var, cnn, cfg)
    for _ in range(3):
        _, permuted = brute_force_energy(d, f_depth, f_var, cnn, cfg,
                                         order=rng.permutation(n))
        assert permuted == pytest.approx(base, abs=1e-12)
    br = dn.energy(d, (f_depth, f_var), cnn, cfg)
    assert br.e_semi_dense == pytest.approx(base, abs=1e-12)


def test_breakdown_total_identity():
    cfg = FusionConfig()
    rng = np.random.default_rng(4)
    d, f_depth, f_var, cnn = _instance(rng)
    br = dn.energy(d, (f_depth, f_var), cnn, cfg, use_cnn_depth_term=True)
    total = br.e_cnn_grad + cfg.lam * br.e_semi_dense + br.e_cnn_depth
    assert br.e_total == pytest.approx(total, rel=1e-10)


def _fd_gradient(d, f_depth, f_var, cnn, cfg, **flags):
    grad = np.zeros_like(d)
    for y in range(d.shape[0]):
        for x in range(d.shape[1]):
            h = 1e-5 * d[y, x]
            dp = d.copy(); dp[y, x] += h
            dm = d.copy(); dm[y, x] -= h
            ep = dn.energy(dp, (f_depth, f_var), cnn, cfg, **flags).e_total
            em = dn.energy(dm, (f_depth, f_var), cnn, cfg, **flags).e_total
            grad[y, x] = (ep - em) / (2 * h)
    return grad


@pytest.mark.parametrize("flags", [
    {},
    {"use_charbonnier": False},
    {"use_cnn_depth_term": True},
    {"use_cnn_grad": False},
])
def test_gradient_matches_finite_differences(flags):
    cfg = FusionConfig()
    rng = np.random.default_rng(8)
    d, f_depth, f_var, cnn = _instance(rng, h=12, w=12)
    analytic = dn.energy_gradient(d, (f_depth, f_var), cnn, cfg, **flags)
    numeric = _fd_gradient(d, f_depth, f_var, cnn, cfg, **flags)
    sig = np.abs(analytic) > 1e-8
    if sig.any():
        rel = np.abs(analytic - numeric)[sig] / np.abs(analytic)[sig]
        assert rel.max() < 1e-3


def test_gradient_zero_at_global_minimum():
    cfg = FusionConfig()
    rng = np.random.default_rng(9)
    cnn = rng.uniform(0.2, 1.0, (10, 10))
    empty = np.zeros((10, 10))
    grad = dn.energy_gradient(cnn.copy(), (empty, empty), cnn, cfg)
    assert np.abs(grad).max() == 0.0


def test_lambda_zero_disables_data_term_gradient():
    cfg = FusionConfig(lam=0.0)
    rng = np.random.default_rng(10)
    d, f_depth, f_var, cnn = _instance(rng)
    only_data = dn.energy_gradient(d, (f_depth, f_var), cnn, cfg,
                                   use_cnn_grad=False)
    assert np.abs(only_data).max() == 0.0


def test_cnn_depth_term_values():
    cfg = FusionConfig()
    assert dn.energy_cnn_depth_ablation(np.array([[0.5]]), np.array([[0.5]]), cfg) == 0.0
    value = dn.energy_cnn_depth_ablation(np.array([[1.0]]), np.array([[0.5]]), cfg)
    assert value == pytest.approx(0.0625, abs=1e-15)  # (0.25) * (0.25)

    rng = np.random.default_rng(11)
    d, _, _, cnn = _instance(rng)
    expected = sum((d[y, x] - cnn[y, x]) ** 2 * cnn[y, x] ** 2
                   for y in range(8) for x in range(8)) / 64
    assert dn.energy_cnn_depth_ablation(d, cnn, cfg) == pytest.approx(expected, abs=1e-12)


def test_densify_is_fixed_point_with_empty_data_term():
    cfg = FusionConfig()
    rng = np.random.default_rng(12)
    cnn = rng.uniform(0.2, 1.0, (10, 10))
    empty = np.zeros((10, 10))
    out = dn.densify((empty, empty), cnn, cfg)
    assert np.array_equal(out, cnn)


def test_densify_with_lambda_zero_returns_prediction_exactly():
    cfg = FusionConfig(lam=0.0)
    rng = np.random.default_rng(13)
    d, f_depth, f_var, cnn = _instance(rng)
    out = dn.densify((f_depth, f_var), cnn, cfg)
    assert np.array_equal(out, cnn)


def test_densify_output_respects_clamp_and_decreases_energy():
    cfg = FusionConfig()
    rng = np.random.default_rng(14)
    _, f_depth, f_var, cnn = _instance(rng, h=16, w=16, valid_frac=0.4)
    trace = []
    out = dn.densify((f_depth, f_var), cnn, cfg, trace=trace)
    assert (out >= cfg.min_inverse_depth).all()
    assert len(trace) == cfg.iterations + 1
    assert trace[-1].e_total <= trace[0].e_total


def test_densify_raises_on_non_finite_energy():
    cfg = FusionConfig()
    cnn = np.zeros((4, 4))  # log(0) in the gradient term
    empty = np.zeros((4, 4))
    with pytest.raises(dn.NonFiniteEnergy):
        dn.densify((empty, empty), cnn, cfg)
