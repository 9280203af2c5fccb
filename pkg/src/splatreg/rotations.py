"""Quaternion and SO(3) helpers.

Quaternions are stored scalar-first (w, x, y, z) and use the Hamilton product.
All functions accept stacked inputs of shape (..., 4) or (..., 3, 3).
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> Array:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q) -> Array:
    """Flip sign so that w >= 0 (q and -q encode the same rotation)."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_conjugate(q) -> Array:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b) -> Array:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q) -> Array:
    """Rotation matrix of a unit quaternion. The input is not renormalized."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R = np.stack(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R) -> Array:
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        diag = (tr, m[0, 0], m[1, 1], m[2, 2])
        i = int(np.argmax(diag))
        if i == 0:
            r = np.sqrt(1.0 + tr)
            q = (0.5 * r, (m[2, 1] - m[1, 2]) / (2 * r),
                 (m[0, 2] - m[2, 0]) / (2 * r), (m[1, 0] - m[0, 1]) / (2 * r))
        elif i == 1:
            r = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / (2 * r), 0.5 * r,
                 (m[0, 1] + m[1, 0]) / (2 * r), (m[0, 2] + m[2, 0]) / (2 * r))
        elif i == 2:
            r = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / (2 * r), (m[0, 1] + m[1, 0]) / (2 * r),
                 0.5 * r, (m[1, 2] + m[2, 1]) / (2 * r))
        else:
            r = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
            q = ((m[1, 0] - m[0, 1]) / (2 * r), (m[0, 2] + m[2, 0]) / (2 * r),
                 (m[1, 2] + m[2, 1]) / (2 * r), 0.5 * r)
        out[k] = q
    out = quat_canonical(quat_normalize(out))
    return out.reshape(R.shape[:-2] + (4,))


def skew(v) -> Array:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> Array:
    """Rodrigues formula: rotation by |omega| radians about omega/|omega|."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-300:
        return np.eye(3)
    K = skew(omega / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def axis_angle_quat(axis, angle: float) -> Array:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians, in [0, pi].

    Uses atan2(sin, cos) rather than arccos of the trace so that angles near
    zero keep full precision.
    """
    R = np.asarray(R, dtype=np.float64)
    c = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) / 2.0
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v) / 2.0
    return float(np.arctan2(s, c))


def random_quat(rng: np.random.Generator, size=None) -> Array:
    """Uniformly distributed unit quaternions (normalized 4D Gaussian)."""
    shape = (4,) if size is None else (size, 4)
    return quat_normalize(rng.normal(size=shape))
