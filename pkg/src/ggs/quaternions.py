"""Quaternion helpers (w, x, y, z ordering) with analytic Jacobians."""

from __future__ import annotations

import numpy as np

__all__ = ["normalize", "normalize_backward", "to_rotation_matrices", "rotation_backward"]


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def normalize_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient through q_hat = q / |q|: (I - q_hat q_hat^T) / |q| applied rowwise."""
    q = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    dot = np.sum(u * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - u * dot) / n


def to_rotation_matrices(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions to (N, 3, 3) rotation matrices; inputs are normalized
    first so the result is orthonormal for any nonzero quaternion."""
    u = normalize(np.asarray(q, dtype=np.float64).reshape(-1, 4))
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    r = np.empty((u.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_backward(q_raw: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient of L(R(q/|q|)) w.r.t. the raw quaternion, given dL/dR (N, 3, 3)."""
    q = np.asarray(q_raw, dtype=np.float64).reshape(-1, 4)
    u = normalize(q)
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    g = np.asarray(grad_r, dtype=np.float64).reshape(-1, 3, 3)

    def inner(p00, p01, p02, p10, p11, p12, p20, p21, p22):
        return 2.0 * (
            g[:, 0, 0] * p00 + g[:, 0, 1] * p01 + g[:, 0, 2] * p02
            + g[:, 1, 0] * p10 + g[:, 1, 1] * p11 + g[:, 1, 2] * p12
            + g[:, 2, 0] * p20 + g[:, 2, 1] * p21 + g[:, 2, 2] * p22
        )

    zero = np.zeros_like(w)
    gu = np.stack(
        [
            inner(zero, -z, y, z, zero, -x, -y, x, zero),
            inner(zero, y, z, y, -2 * x, -w, z, w, -2 * x),
            inner(-2 * y, x, w, x, zero, z, -w, z, -2 * y),
            inner(-2 * z, -w, x, w, -2 * z, y, x, y, zero),
        ],
        axis=1,
    )
    return normalize_backward(q, gu)
