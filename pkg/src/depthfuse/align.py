"""Scale- and shift-correction of relative inverse-depth predictions.

Single-image depth networks predict inverse depth only up to an unknown
global scale and shift.  Fitting d_semi ~ a * d_cnn + b over the pixels
where both maps are valid, by plain least squares on the 2x2 normal
equations, brings the prediction into the SLAM frame's scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


class DegenerateRegression(NumericError):
    """Normal matrix is singular (constant or near-constant regressor)."""


class NonPositiveScale(NumericError):
    """Least squares fit produced a non-positive scale."""


@dataclass(frozen=True)
class AffineDepthCorrection:
    """Scale a (unitless, positive) and shift b (1/m) applied as a*d + b."""

    a: float
    b: float


def solve_scale_shift(cnn: np.ndarray, semi: np.ndarray) -> AffineDepthCorrection:
    """Fit (a, b) minimizing sum((a*cnn + b - semi)^2) over common valid pixels.

    Raises DegenerateRegression when the 2x2 normal matrix determinant
    falls below 1e-12 and NonPositiveScale when the minimizer has a <= 0
    (contradictory inputs).
    """
    both = (cnn > 0) & (semi > 0)
    x = cnn[both].astype(np.float64)
    y = semi[both].astype(np.float64)
    if x.size < 2:
        raise DegenerateRegression(f"need at least 2 common valid pixels, got {x.size}")

    sxx = float(np.dot(x, x))
    sx = float(x.sum())
    n = float(x.size)
    det = sxx * n - sx * sx
    if det < 1e-12:
        raise DegenerateRegression(f"normal matrix determinant {det} below 1e-12")

    sxy = float(np.dot(x, y))
    sy = float(y.sum())
    a = (n * sxy - sx * sy) / det
    b = (sxx * sy - sx * sxy) / det
    if not a > 0:
        raise NonPositiveScale(f"solved scale {a} is not positive")
    return AffineDepthCorrection(a=a, b=b)


def apply_correction(cnn: np.ndarray, correction: AffineDepthCorrection,
                     floor: float) -> np.ndarray:
    """Map every valid pixel through a*d + b, clamped below at `floor`.

    The clamp keeps the corrected map strictly positive so later
    log-domain terms stay defined; invalid pixels stay invalid.
    """
    if not (np.isfinite(correction.a) and np.isfinite(correction.b)):
        raise ValueError("correction must be finite")
    out = np.zeros_like(cnn, dtype=np.float64)
    valid = cnn > 0
    out[valid] = np.maximum(correction.a * cnn[valid] + correction.b, floor)
    return out
