"""Sim(3) poses, pinhole projection, and depth-map warping.

A similarity transform acts on points as p' = s * R @ p + t.  Tangent
vectors are 7-vectors ordered (translation x3, rotation x3, log-scale x1);
exp/log follow the closed form for the similarity group, where the
translation part goes through the matrix W = integral of e^(u*sigma) *
R(u*theta) over u in [0,1].

Rotations are stored as unit quaternions in (x, y, z, w) order and
converted to matrices only inside kernels.  Pixel coordinates are
(x, y) = (column, row); inverse depth is 1/meters with 0 marking an
invalid pixel.

warp_depth_map keeps the warped inverse depth in the form
d_out = d / (s * (R @ ray)_z + t_z * d), which makes the identity warp
reproduce its input bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


class AngleAtCut(NumericError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class BehindCamera(NumericError):
    """Point with non-positive depth cannot be projected."""


# ---------------------------------------------------------------------------
# quaternion helpers (x, y, z, w order)

def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.sqrt(np.dot(q, q)))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion must be nonzero and finite")
    return q / n


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _quat_from_rotvec(w_vec: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w_vec))
    # sin(theta/2)/theta via sinc, exact and smooth through theta = 0
    half_sinc = 0.5 * np.sinc(theta / (2.0 * np.pi))
    return np.array([
        w_vec[0] * half_sinc,
        w_vec[1] * half_sinc,
        w_vec[2] * half_sinc,
        np.cos(0.5 * theta),
    ])


def _rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    if w < 0:  # double cover: pick the representative with angle in [0, pi]
        x, y, z, w = -x, -y, -z, -w
    n = np.sqrt(x * x + y * y + z * z)
    if n < 1e-9:
        # theta ~ 2n/w; second-order correction keeps the round trip tight
        scale = (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    else:
        scale = 2.0 * np.arctan2(n, w) / n
    return np.array([x * scale, y * scale, z * scale])


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# Sim(3)

@dataclass(frozen=True)
class Sim3Pose:
    """Similarity transform: p -> scale * R(quat) @ p + t.

    The quaternion is renormalized on construction; scale must be
    strictly positive.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(self.quat))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        object.__setattr__(self, "scale", float(self.scale))
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not np.isfinite(self.t).all():
            raise ValueError("translation must be finite")

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix [s*R, t; 0, 1]."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation_matrix().T) + self.t


def identity() -> Sim3Pose:
    return Sim3Pose()


def compose(a: Sim3Pose, b: Sim3Pose) -> Sim3Pose:
    """Composition with matrix-product semantics: (a*b)(p) = a(b(p))."""
    return Sim3Pose(
        quat=_quat_multiply(a.quat, b.quat),
        t=a.scale * (a.rotation_matrix() @ b.t) + a.t,
        scale=a.scale * b.scale,
    )


def inverse(a: Sim3Pose) -> Sim3Pose:
    q_inv = _quat_conjugate(a.quat)
    r_inv = _quat_to_matrix(q_inv)
    return Sim3Pose(
        quat=q_inv,
        t=-(r_inv @ a.t) / a.scale,
        scale=1.0 / a.scale,
    )


def _calc_w(omega_hat: np.ndarray, theta: float, sigma: float) -> np.ndarray:
    """W = integral over u in [0,1] of e^(u*sigma) * exp(u*omega_hat),
    written as C*I + A*omega_hat + B*omega_hat^2."""
    if sigma == 0.0:
        big_c = 1.0
    else:
        big_c = np.expm1(sigma) / sigma

    if theta < 1e-5:
        if abs(sigma) < 1e-2:
            # series of int u e^(u s) du and (1/2) int u^2 e^(u s) du
            big_a = 0.5 + sigma / 3.0 + sigma**2 / 8.0 + sigma**3 / 30.0 + sigma**4 / 144.0
            big_b = (1.0 / 6.0 + sigma / 8.0 + sigma**2 / 20.0
                     + sigma**3 / 72.0 + sigma**4 / 336.0)
        else:
            s = np.exp(sigma)
            big_a = (s * (sigma - 1.0) + 1.0) / sigma**2
            big_b = (s * (0.5 * sigma**2 - sigma + 1.0) - 1.0) / sigma**3
    else:
        s = np.exp(sigma)
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        # 1 - s*cos written to stay accurate when both sigma and theta are small
        one_minus_b = 2.0 * np.sin(0.5 * theta) ** 2 - np.expm1(sigma) * cos_t
        a = s * sin_t
        c = theta * theta + sigma * sigma
        big_a = (a * sigma + one_minus_b * theta) / (theta * c)
        big_b = (big_c - (-one_minus_b * sigma + a * theta) / c) / (theta * theta)

    return big_c * np.eye(3) + big_a * omega_hat + big_b * (omega_hat @ omega_hat)


def sim3_exp(xi: np.ndarray) -> Sim3Pose:
    """Exponential map from a 7-vector (v, omega, sigma) to a pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(7)
    if not np.isfinite(xi).all():
        raise ValueError("tangent vector must be finite")
    v, omega, sigma = xi[:3], xi[3:6], float(xi[6])
    theta = float(np.linalg.norm(omega))
    w_mat = _calc_w(_hat(omega), theta, sigma)
    return Sim3Pose(quat=_quat_from_rotvec(omega), t=w_mat @ v, scale=float(np.exp(sigma)))


def sim3_log(pose: Sim3Pose) -> np.ndarray:
    """Inverse of sim3_exp.  Raises AngleAtCut within 1e-6 of the pi cut."""
    omega = _rotvec_from_quat(pose.quat)
    theta = float(np.linalg.norm(omega))
    if theta > np.pi - 1e-6:
        raise AngleAtCut(f"rotation angle {theta} within 1e-6 of pi")
    sigma = float(np.log(pose.scale))
    w_mat = _calc_w(_hat(omega), theta, sigma)
    v = np.linalg.solve(w_mat, pose.t)
    return np.concatenate([v, omega, [sigma]])


def tangent_distance(a: Sim3Pose, b: Sim3Pose) -> float:
    """Norm of log(a^-1 * b); zero iff the poses coincide."""
    return float(np.linalg.norm(sim3_log(compose(inverse(a), b))))


# ---------------------------------------------------------------------------
# pinhole projection

def backproject(pixel, inv_depth: float, intrinsics) -> np.ndarray:
    """Pixel (x, y) with inverse depth d > 0 to a camera-frame 3D point."""
    if not inv_depth > 0:
        raise ValueError(f"inverse depth must be positive, got {inv_depth}")
    x, y = pixel
    z = 1.0 / inv_depth
    return np.array([
        (x - intrinsics.cx) / intrinsics.fx * z,
        (y - intrinsics.cy) / intrinsics.fy * z,
        z,
    ])


def project(point: np.ndarray, intrinsics):
    """Camera-frame 3D point to ((x, y), inverse depth).

    Raises BehindCamera when the point's depth is non-positive.
    """
    px, py, pz = point
    if not pz > 0:
        raise BehindCamera(f"point depth {pz} is not positive")
    x = intrinsics.fx * (px / pz) + intrinsics.cx
    y = intrinsics.fy * (py / pz) + intrinsics.cy
    return (x, y), 1.0 / pz


def _pixel_rays(intrinsics) -> np.ndarray:
    """Unit-depth rays for the full pixel grid, shape (3, H*W), row-major."""
    xs = np.arange(intrinsics.width, dtype=np.float64)
    ys = np.arange(intrinsics.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    rx = (gx - intrinsics.cx) / intrinsics.fx
    ry = (gy - intrinsics.cy) / intrinsics.fy
    return np.stack([rx.ravel(), ry.ravel(), np.ones(rx.size)])


def warp_depth_map(depth_src: np.ndarray, src_to_dst: Sim3Pose, intrinsics) -> np.ndarray:
    """Reproject a source inverse-depth map into the destination view.

    Each valid source pixel is back-projected, transformed, re-projected,
    and written to the nearest destination pixel; collisions keep the
    nearer point (larger inverse depth), exact ties keep the first source
    pixel in row-major order.  Out-of-frame and behind-camera points are
    dropped; untouched destination pixels stay invalid (0).
    """
    h, w = depth_src.shape
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise ValueError("depth map size does not match intrinsics")

    flat = depth_src.ravel()
    valid = np.flatnonzero(flat > 0)
    out = np.zeros_like(depth_src, dtype=np.float64)
    if valid.size == 0:
        return out

    d = flat[valid].astype(np.float64)
    rays = _pixel_rays(intrinsics)[:, valid]

    # Q = s*R@(ray/d) + t  ==  (s*R@ray + t*d) / d; carrying the factor d
    # keeps the identity warp exact.
    b = src_to_dst.scale * (src_to_dst.rotation_matrix() @ rays)
    q_scaled = b + src_to_dst.t[:, None] * d[None, :]

    front = q_scaled[2] > 0
    d, q_scaled = d[front], q_scaled[:, front]
    if d.size == 0:
        return out

    u = intrinsics.fx * (q_scaled[0] / q_scaled[2]) + intrinsics.cx
    v = intrinsics.fy * (q_scaled[1] / q_scaled[2]) + intrinsics.cy
    d_out = d / q_scaled[2]

    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    in_frame = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    ui, vi, d_out = ui[in_frame], vi[in_frame], d_out[in_frame]

    # z-buffer: running maximum in source order; ties keep the first value
    np.maximum.at(out, (vi, ui), d_out)
    return out


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear interpolation at float pixel coordinates.

    Returns (values, ok) where ok marks samples whose four neighbours are
    all inside the image.  Values outside are returned as 0.
    """
    h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    ok = (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = xs - x0c
    fy = ys - y0c
    top = image[y0c, x0c] * (1 - fx) + image[y0c, x0c + 1] * fx
    bot = image[y0c + 1, x0c] * (1 - fx) + image[y0c + 1, x0c + 1] * fx
    values = top * (1 - fy) + bot * fy
    return np.where(ok, values, 0.0), ok
