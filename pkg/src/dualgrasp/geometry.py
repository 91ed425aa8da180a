"""SE(3) and SE(3) x SE(3) pose algebra.

Poses are 4x4 homogeneous matrices (``(..., 4, 4)`` arrays); a dual pose is a
``(..., 2, 4, 4)`` array holding the first and second arm.  Twists are ordered
translational part first, rotational part second: ``(v, w)``.  Every function
accepts arbitrary leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

# Below this rotation angle the closed-form coefficients lose precision to
# cancellation; switch to their Taylor series (truncation error < 1e-16 here).
SMALL_ANGLE = 0.05
# log is singular at angle pi: the rotation axis sign is undetermined.
NEAR_PI = 1e-6


class AngleNearPi(ValueError):
    """Raised by :func:`logmap` when a rotation angle is within 1e-6 of pi."""


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _exp_coeffs(theta: np.ndarray):
    """Return sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    t4 = t2 * t2
    t6 = t4 * t2
    a = np.where(small, 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0, (t - np.sin(t)) / t**3)
    return a, b, c


def make_pose(rotation: np.ndarray | None = None, translation: np.ndarray | None = None) -> np.ndarray:
    pose = np.eye(4)
    if rotation is not None:
        pose[:3, :3] = rotation
    if translation is not None:
        pose[:3, 3] = translation
    return pose


def expmap(twist: np.ndarray) -> np.ndarray:
    """Exponential of se(3) twists ``(..., 6)`` -> poses ``(..., 4, 4)``.

    Rotation by Rodrigues' formula, translation by the left Jacobian ``V(w) v``.
    """
    twist = np.asarray(twist, dtype=float)
    v, w = twist[..., :3], twist[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _exp_coeffs(theta)
    K = skew(w)
    K2 = K @ K
    eye = np.eye(3)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    out = np.zeros(twist.shape[:-1] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = np.einsum("...ij,...j->...i", V, v)
    out[..., 3, 3] = 1.0
    return out


def rotation_angle(R: np.ndarray) -> np.ndarray:
    sin_t = 0.5 * np.linalg.norm(vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(sin_t, cos_t)


def logmap(pose: np.ndarray) -> np.ndarray:
    """Logarithm of poses ``(..., 4, 4)`` -> twists ``(..., 6)``.

    Raises:
        AngleNearPi: if any rotation angle is within ``NEAR_PI`` of pi.
    """
    pose = np.asarray(pose, dtype=float)
    R, t = pose[..., :3, :3], pose[..., :3, 3]
    theta = rotation_angle(R)
    if np.any(theta > np.pi - NEAR_PI):
        raise AngleNearPi(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    small = theta < SMALL_ANGLE
    a, b, _ = _exp_coeffs(theta)
    # w = theta / (2 sin theta) * vee(R - R^T) = vee(R - R^T) / (2 a)
    w = vee(R - np.swapaxes(R, -1, -2)) / (2.0 * a[..., None])
    K = skew(w)
    tt = np.where(small, 1.0, theta)
    # V^-1 = I - K/2 + d K^2,  d = (1 - a / (2 b)) / theta^2
    t2 = theta**2
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2**3 / 1209600.0,
        (1.0 - a / (2.0 * b)) / tt**2,
    )
    Vinv = np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)
    v = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([v, w], axis=-1)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a) @ np.asarray(b)


def inverse(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    Rt = np.swapaxes(pose[..., :3, :3], -1, -2)
    out = np.zeros_like(pose)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, pose[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def expmap2(v: np.ndarray) -> np.ndarray:
    """Dual exponential: ``(..., 12)`` -> ``(..., 2, 4, 4)``."""
    v = np.asarray(v, dtype=float)
    return expmap(v.reshape(v.shape[:-1] + (2, 6)))


def logmap2(h: np.ndarray) -> np.ndarray:
    """Dual logarithm: ``(..., 2, 4, 4)`` -> ``(..., 12)`` (arm 1 block first)."""
    tw = logmap(h)
    return tw.reshape(tw.shape[:-2] + (12,))


def left_update(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """World-frame update ``(Exp(u[:6]) h1, Exp(u[6:]) h2)``."""
    return expmap2(u) @ np.asarray(h, dtype=float)


def left_jacobian(twist: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Left Jacobian ``J`` (..., 6, 6) of the exponential: ``Exp(x + d) ~ Exp(J d) Exp(x)``.

    Built column by column from central differences of the exponential, so it
    stays valid for rotation angles past pi (no log branch is involved).
    Truncation error is O(step^2).
    """
    x = np.asarray(twist, dtype=float)
    base_inv = inverse(expmap(x))
    d = step * np.eye(6)
    plus = expmap(x[..., None, :] + d) @ base_inv[..., None, :, :]
    minus = expmap(x[..., None, :] - d) @ base_inv[..., None, :, :]
    cols = (logmap(plus) - logmap(minus)) / (2 * step)  # (..., 6 columns, 6)
    return np.swapaxes(cols, -1, -2)


def transform_points(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``R x + t`` to points ``(..., n, 3)`` for poses ``(..., 4, 4)``."""
    pose = np.asarray(pose, dtype=float)
    pts = np.asarray(pts, dtype=float)
    return pts @ np.swapaxes(pose[..., :3, :3], -1, -2) + pose[..., None, :3, 3]


def point_pose_jacobian(pose: np.ndarray, x_local: np.ndarray) -> np.ndarray:
    """Jacobian (3x6) of the world point ``pose * x_local`` w.r.t. a left twist.

    Translational columns are the identity, rotational columns ``-[p]x`` where
    ``p`` is the world position of the point.
    """
    p = transform_points(pose, np.asarray(x_local, dtype=float)[..., None, :])[..., 0, :]
    jac = np.zeros(p.shape[:-1] + (3, 6))
    jac[..., :, :3] = np.eye(3)
    jac[..., :, 3:] = -skew(p)
    return jac


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Rotations uniform on SO(3) (normalized Gaussian quaternions)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def pose_to_list(pose: np.ndarray) -> list:
    """Row-major nested 4x4 list for JSON."""
    return [[float(x) for x in row] for row in np.asarray(pose, dtype=float).reshape(4, 4)]


def pose_from_list(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size != 16:
        raise ValueError(f"expected 16 floats for a pose, got {arr.size}")
    return arr.reshape(4, 4)


def dual_to_json(h: np.ndarray) -> list:
    return [pose_to_list(h[0]), pose_to_list(h[1])]


def dual_from_json(values) -> np.ndarray:
    if len(values) != 2:
        raise ValueError("a dual pose is a 2-element array of 4x4 matrices")
    return np.stack([pose_from_list(values[0]), pose_from_list(values[1])])
