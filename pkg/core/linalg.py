from __future__ import annotations

import numpy as np


def cholesky_update(R: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rank-one update of an upper-triangular Cholesky factor.

    Returns R' with R'ᵀR' = RᵀR + x xᵀ. R is not modified. The diagonal of R
    must be strictly positive.
    """
    R = np.array(R, dtype=float, copy=True)
    x = np.array(x, dtype=float, copy=True)
    n = R.shape[0]
    if R.shape != (n, n) or x.shape != (n,):
        raise ValueError("Invalid dimensions")
    for k in range(n):
        rkk = R[k, k]
        r = np.hypot(rkk, x[k])
        c = r / rkk
        s = x[k] / rkk
        R[k, k] = r
        if k + 1 < n:
            R[k, k + 1:] = (R[k, k + 1:] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * R[k, k + 1:]
    return R


def reconstruction_error(R: np.ndarray, A: np.ndarray) -> float:
    """Frobenius norm ‖RᵀR − A‖."""
    return float(np.linalg.norm(R.T @ R - A))
