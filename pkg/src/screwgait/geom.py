"""Quaternion and rotation helpers, batched over a leading axis.

Quaternions are (w, x, y, z), unit norm, float64. All functions accept
arrays shaped (..., 4) / (..., 3) and broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (3,). Same result as np.cross but
    without its per-call axis plumbing, which dominates on small batches."""
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def quat_identity(shape=()) -> np.ndarray:
    q = np.zeros(shape + (4,), dtype=np.float64)
    q[..., 0] = 1.0
    return q


def quat_from_axis_angle(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    u = axis / np.where(n == 0.0, 1.0, n)
    half = 0.5 * angle[..., None]
    q = np.concatenate([np.cos(half), u * np.sin(half)], axis=-1)
    return q


def quat_about_z(angle: np.ndarray) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    q = np.zeros(angle.shape + (4,), dtype=np.float64)
    q[..., 0] = np.cos(half)
    q[..., 3] = np.sin(half)
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by quaternions q (Hamilton convention)."""
    w = q[..., 0:1]
    u = q[..., 1:4]
    uv = cross3(u, v)
    uuv = cross3(u, uv)
    return v + 2.0 * (w * uv + uuv)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """(..., 4) -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """(..., 3, 3) -> (..., 4); branch-free Shepperd variant, w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.einsum("...ii->...", m)
    # Four candidate constructions; pick the numerically largest pivot.
    qs = np.empty(m.shape[:-2] + (4, 4), dtype=np.float64)
    qs[..., 0, 0] = 1.0 + t
    qs[..., 0, 1] = m[..., 2, 1] - m[..., 1, 2]
    qs[..., 0, 2] = m[..., 0, 2] - m[..., 2, 0]
    qs[..., 0, 3] = m[..., 1, 0] - m[..., 0, 1]
    qs[..., 1, 0] = m[..., 2, 1] - m[..., 1, 2]
    qs[..., 1, 1] = 1.0 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2]
    qs[..., 1, 2] = m[..., 0, 1] + m[..., 1, 0]
    qs[..., 1, 3] = m[..., 0, 2] + m[..., 2, 0]
    qs[..., 2, 0] = m[..., 0, 2] - m[..., 2, 0]
    qs[..., 2, 1] = m[..., 0, 1] + m[..., 1, 0]
    qs[..., 2, 2] = 1.0 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2]
    qs[..., 2, 3] = m[..., 1, 2] + m[..., 2, 1]
    qs[..., 3, 0] = m[..., 1, 0] - m[..., 0, 1]
    qs[..., 3, 1] = m[..., 0, 2] + m[..., 2, 0]
    qs[..., 3, 2] = m[..., 1, 2] + m[..., 2, 1]
    qs[..., 3, 3] = 1.0 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2]
    # Each row p equals 4*component_p*(w,x,y,z); pick the best-conditioned one.
    pivot = np.argmax(qs[..., np.arange(4), np.arange(4)], axis=-1)
    q = np.take_along_axis(qs, pivot[..., None, None].repeat(4, axis=-1), axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., 0:1] < 0.0, -q, q)


def rodrigues(axis: np.ndarray, angle: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v about unit axis by angle (broadcasting)."""
    angle = np.asarray(angle, dtype=np.float64)[..., None]
    c, s = np.cos(angle), np.sin(angle)
    dot = np.sum(axis * v, axis=-1, keepdims=True)
    return v * c + cross3(axis, v) * s + axis * dot * (1.0 - c)


def rpy_to_quat(roll, pitch, yaw) -> np.ndarray:
    """Intrinsic z-y-x (yaw, then pitch, then roll)."""
    qz = quat_about_z(np.asarray(yaw, dtype=np.float64))
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.asarray(pitch, dtype=np.float64))
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.asarray(roll, dtype=np.float64))
    return quat_mul(quat_mul(qz, qy), qx)
