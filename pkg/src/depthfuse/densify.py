"""Dense inverse-depth estimation by first-order energy minimization.

The energy couples two terms over the image grid:

* a gradient-consistency term: forward differences of log inverse depth
  must match those of the corrected single-image prediction, each pixel's
  contribution weighted by the prediction's squared inverse depth (a
  stand-in for prediction variance that regularizes near structure more
  strongly than far structure), averaged over all pixels;
* a data term: squared deviation from the filtered semi-dense values,
  normalized by their variance, passed through the robust penalty
  rho(y) = (y + epsilon^2)^alpha and averaged over the valid pixels.

Minimization runs a fixed number of adaptive-moment gradient steps
(decay rates 0.9 / 0.999, bias-corrected, epsilon-hat 1e-8) from the
corrected prediction, clamping below at min_inverse_depth after every
step.  Gradients are analytic, including the adjoint contributions of
the forward-difference stencils.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FusionConfig
from .errors import NumericError

# Guards the data term against legitimately zero re-estimated variances
# (isolated valid pixels); value in (1/m)^2.
VARIANCE_FLOOR = 1e-10

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class NonFiniteEnergy(NumericError):
    """Energy or gradient became non-finite during optimization."""


@dataclass(frozen=True)
class EnergyBreakdown:
    """Total energy and its terms; e_total = e_cnn_grad + lam * e_semi_dense
    (+ e_cnn_depth when the extra consistency term is enabled)."""

    e_total: float
    e_cnn_grad: float
    e_semi_dense: float
    e_cnn_depth: float = 0.0


def charbonnier(y, epsilon: float, alpha: float):
    """Robust penalty (y + epsilon^2)^alpha on a normalized squared residual."""
    return (y + epsilon * epsilon) ** alpha


def charbonnier_grad(y, epsilon: float, alpha: float):
    return alpha * (y + epsilon * epsilon) ** (alpha - 1.0)


def _forward_diff_x(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[:, :-1] = a[:, 1:] - a[:, :-1]
    return out


def _forward_diff_y(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[:-1, :] = a[1:, :] - a[:-1, :]
    return out


def _adjoint_diff_x(a: np.ndarray) -> np.ndarray:
    """Transpose of _forward_diff_x: out[y,x] = a[y,x-1] - a[y,x] (border-aware)."""
    out = np.zeros_like(a)
    out[:, :-1] -= a[:, :-1]
    out[:, 1:] += a[:, :-1]
    return out


def _adjoint_diff_y(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[:-1, :] -= a[:-1, :]
    out[1:, :] += a[:-1, :]
    return out


def energy(d_opt: np.ndarray, filtered: tuple[np.ndarray, np.ndarray],
           cnn_corrected: np.ndarray, cfg: FusionConfig, *,
           use_charbonnier: bool = True, use_cnn_grad: bool = True,
           use_cnn_depth_term: bool = False) -> EnergyBreakdown:
    """Evaluate the densification energy at a dense iterate.

    `filtered` is the (depth, variance) pair of the semi-dense data term;
    its valid set may be empty, in which case the data term is zero.
    """
    d_opt = np.asarray(d_opt, dtype=np.float64)
    cnn = np.asarray(cnn_corrected, dtype=np.float64)
    f_depth, f_var = filtered
    n_pixels = d_opt.size

    e_cnn_grad = 0.0
    if use_cnn_grad:
        # non-positive entries violate the preconditions; the resulting
        # non-finite energy is caught by densify's NonFiniteEnergy check
        with np.errstate(invalid="ignore", divide="ignore"):
            log_d = np.log(d_opt)
            log_c = np.log(cnn)
            ex = _forward_diff_x(log_d) - _forward_diff_x(log_c)
            ey = _forward_diff_y(log_d) - _forward_diff_y(log_c)
            e_cnn_grad = float(np.sum((ex * ex + ey * ey) * cnn * cnn) / n_pixels)

    valid = f_depth > 0
    n_valid = int(valid.sum())
    e_semi = 0.0
    if n_valid > 0:
        r = d_opt[valid] - f_depth[valid]
        y = r * r / np.maximum(f_var[valid], VARIANCE_FLOOR)
        if use_charbonnier:
            y = charbonnier(y, cfg.epsilon, cfg.alpha)
        e_semi = float(np.sum(y) / n_valid)

    e_cnn_depth = 0.0
    if use_cnn_depth_term:
        e_cnn_depth = energy_cnn_depth_ablation(d_opt, cnn, cfg)

    e_total = e_cnn_grad + cfg.lam * e_semi + e_cnn_depth
    return EnergyBreakdown(e_total=e_total, e_cnn_grad=e_cnn_grad,
                           e_semi_dense=e_semi, e_cnn_depth=e_cnn_depth)


def energy_gradient(d_opt: np.ndarray, filtered: tuple[np.ndarray, np.ndarray],
                    cnn_corrected: np.ndarray, cfg: FusionConfig, *,
                    use_charbonnier: bool = True, use_cnn_grad: bool = True,
                    use_cnn_depth_term: bool = False) -> np.ndarray:
    """Analytic per-pixel derivative of the energy with respect to d_opt."""
    d_opt = np.asarray(d_opt, dtype=np.float64)
    cnn = np.asarray(cnn_corrected, dtype=np.float64)
    f_depth, f_var = filtered
    n_pixels = d_opt.size

    grad = np.zeros_like(d_opt)
    if use_cnn_grad:
        with np.errstate(invalid="ignore", divide="ignore"):
            log_d = np.log(d_opt)
            log_c = np.log(cnn)
            w = cnn * cnn
            ex = _forward_diff_x(log_d) - _forward_diff_x(log_c)
            ey = _forward_diff_y(log_d) - _forward_diff_y(log_c)
            d_log = _adjoint_diff_x(ex * w) + _adjoint_diff_y(ey * w)
            grad += (2.0 / n_pixels) * d_log / d_opt

    valid = f_depth > 0
    n_valid = int(valid.sum())
    if n_valid > 0:
        r = d_opt[valid] - f_depth[valid]
        var = np.maximum(f_var[valid], VARIANCE_FLOOR)
        y = r * r / var
        dy = 2.0 * r / var
        if use_charbonnier:
            dy = charbonnier_grad(y, cfg.epsilon, cfg.alpha) * dy
        semi_grad = np.zeros_like(d_opt)
        semi_grad[valid] = dy / n_valid
        grad += cfg.lam * semi_grad

    if use_cnn_depth_term:
        grad += (2.0 / n_pixels) * (d_opt - cnn) * cnn * cnn

    return grad


def energy_cnn_depth_ablation(d_opt: np.ndarray, cnn_corrected: np.ndarray,
                              cfg: FusionConfig) -> float:
    """Extra direct depth-consistency term used only for ablation runs:
    mean over all pixels of (d_opt - cnn)^2 weighted by cnn^2."""
    d_opt = np.asarray(d_opt, dtype=np.float64)
    cnn = np.asarray(cnn_corrected, dtype=np.float64)
    diff = d_opt - cnn
    return float(np.sum(diff * diff * cnn * cnn) / d_opt.size)


def densify(filtered: tuple[np.ndarray, np.ndarray], cnn_corrected: np.ndarray,
            cfg: FusionConfig, *, use_charbonnier: bool = True,
            use_cnn_grad: bool = True, use_cnn_depth_term: bool = False,
            trace: list | None = None) -> np.ndarray:
    """Minimize the energy from the corrected prediction as starting point.

    Runs cfg.iterations adaptive-moment steps of size cfg.step_size and
    clamps every iterate below at cfg.min_inverse_depth.  When `trace` is
    a list, one EnergyBreakdown per iterate is appended (index 0 is the
    starting point, the last entry the returned map).

    Raises NonFiniteEnergy if any iterate produces a non-finite energy.
    """
    term_flags = dict(use_charbonnier=use_charbonnier, use_cnn_grad=use_cnn_grad,
                      use_cnn_depth_term=use_cnn_depth_term)
    d = np.asarray(cnn_corrected, dtype=np.float64).copy()
    m = np.zeros_like(d)
    v = np.zeros_like(d)

    for step in range(cfg.iterations + 1):
        breakdown = energy(d, filtered, cnn_corrected, cfg, **term_flags)
        if not np.isfinite(breakdown.e_total):
            raise NonFiniteEnergy(
                f"energy became non-finite at iteration {step}: {breakdown}")
        if trace is not None:
            trace.append(breakdown)
        if step == cfg.iterations:
            break

        g = energy_gradient(d, filtered, cnn_corrected, cfg, **term_flags)
        if not np.isfinite(g).all():
            raise NonFiniteEnergy(f"gradient became non-finite at iteration {step}")
        m = _ADAM_BETA1 * m + (1.0 - _ADAM_BETA1) * g
        v = _ADAM_BETA2 * v + (1.0 - _ADAM_BETA2) * g * g
        m_hat = m / (1.0 - _ADAM_BETA1 ** (step + 1))
        v_hat = v / (1.0 - _ADAM_BETA2 ** (step + 1))
        d = d - cfg.step_size * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        d = np.maximum(d, cfg.min_inverse_depth)

    return d
