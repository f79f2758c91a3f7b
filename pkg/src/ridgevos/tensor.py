"""Dense float64 matrix helpers and the SPD solve used by the ridge solver.

Matrices are plain 2-D ``numpy.ndarray`` objects (row-major, float64).
Feature tensors are 3-D arrays laid out channel-major as ``(C, h, w)``;
``flatten_features`` turns one into the ``(h*w, C)`` design matrix.
"""

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .errors import DimensionError, NotPositiveDefiniteError


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def transpose(a):
    return np.ascontiguousarray(as_matrix(a).T)


def cholesky(a):
    """Lower Cholesky factor of ``a``.

    Raises NotPositiveDefiniteError carrying the 0-based index of the
    first non-positive pivot.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape[0]}x{a.shape[1]}")
    c, info = dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(int(info) - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def cho_solve(factor, b):
    b = as_matrix(b, "b")
    z, info = dpotrs(factor, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return z


def spd_solve(a, b):
    """Solve ``a @ z = b`` for symmetric positive-definite ``a``.

    Uses a Cholesky factorization; the explicit inverse is never formed.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"spd_solve needs a square matrix, got {a.shape[0]}x{a.shape[1]}")
    if b.shape[0] != n:
        raise DimensionError(f"cannot solve {n}x{n} system against {b.shape[0]}x{b.shape[1]} right-hand side")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9 * scale:
        raise ValueError("spd_solve: matrix is not symmetric")
    return cho_solve(cholesky(a), b)


def flatten_features(f):
    """``(C, h, w)`` -> ``(h*w, C)``; row index is ``y*w + x``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"feature tensor must be 3-D (C, h, w), got shape {f.shape}")
    c = f.shape[0]
    return np.ascontiguousarray(f.reshape(c, -1).T)


def unflatten_features(x, h, w):
    x = as_matrix(x)
    if x.shape[0] != h * w:
        raise DimensionError(f"cannot unflatten {x.shape[0]} rows into {h}x{w}")
    return np.ascontiguousarray(x.T.reshape(x.shape[1], h, w))
