"""Quaternion and rotation helpers (w, x, y, z convention, float64)."""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b; broadcasts over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; supports a leading batch axis."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate points v (…, 3) by a single quaternion q."""
    return v @ quat_to_matrix(q).T


def rotate_cloud_batch(q_batch: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """Rotate one cloud (N, 3) by each quaternion in (B, 4) -> (B, N, 3)."""
    return np.einsum("bij,nj->bni", quat_to_matrix(q_batch), cloud)


def quat_about_y(angle: float | np.ndarray) -> np.ndarray:
    angle = np.asarray(angle, dtype=float)
    half = angle / 2.0
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, np.sin(half), zeros], axis=-1)


def rotation_about_y(angle: np.ndarray) -> np.ndarray:
    """R_y(angle) matrices; angle may be a scalar or a batch."""
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    zeros, ones = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [
            np.stack([c, zeros, s], axis=-1),
            np.stack([zeros, ones, zeros], axis=-1),
            np.stack([-s, zeros, c], axis=-1),
        ],
        axis=-2,
    )


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniform unit quaternion (Shoemake subgroup algorithm)."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    return np.array(
        [
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
            b * np.cos(2 * np.pi * u3),
        ]
    )


def quat_delta_rotvec(q_new: np.ndarray, q_old: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) taking q_old to q_new; batched."""
    d = quat_multiply(q_new, quat_conjugate(q_old))
    d = np.where(d[..., :1] < 0, -d, d)
    w = np.clip(d[..., 0], -1.0, 1.0)
    vec = d[..., 1:]
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(norm[..., 0], w)
    scale = np.where(norm[..., 0] > 1e-12, angle / np.maximum(norm[..., 0], 1e-12), 2.0)
    return vec * scale[..., None]
