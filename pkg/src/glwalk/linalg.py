"""Small dense linear-algebra helpers (operator norms, rotations)."""

from __future__ import annotations

import numpy as np

SVD_MAX_DIM = 16
POWER_TOL = 1e-12
POWER_MAX_ITER = 10_000


def _power_norm(a: np.ndarray) -> float:
    # largest singular value via power iteration on a^T a
    ata = a.T @ a
    v = np.ones(a.shape[1]) / np.sqrt(a.shape[1])
    lam = 0.0
    for _ in range(POWER_MAX_ITER):
        w = ata @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(nw - lam) <= POWER_TOL * nw:
            lam = nw
            break
        lam = nw
    return float(np.sqrt(lam))


def op_norm(a: np.ndarray) -> float:
    """Spectral norm ``sup_{|x|=1} |a x|``."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] <= SVD_MAX_DIM:
        return float(np.linalg.svd(a, compute_uv=False)[0])
    return _power_norm(a)


def singular_extremes(a: np.ndarray) -> tuple[float, float]:
    """(largest, smallest) singular values."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] <= SVD_MAX_DIM:
        s = np.linalg.svd(a, compute_uv=False)
        return float(s[0]), float(s[-1])
    return _power_norm(a), 1.0 / _power_norm(np.linalg.inv(a))


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotations(angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty(angles.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def haar_orthogonal(gen: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """``count`` Haar-distributed orthogonal matrices (QR of Gaussian, sign-fixed)."""
    if dim == 2:
        return rotations(2.0 * np.pi * gen.random(count))
    z = gen.standard_normal((count, dim, dim))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]
