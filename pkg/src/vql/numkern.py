"""Dense float64 kernels shared by the rest of the package.

Matrices are plain C-contiguous ``float64`` numpy arrays. ``as_matrix`` is the
single place where finiteness and dimensionality are validated.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

DTYPE = np.float64


def as_matrix(x, name: str = "matrix", ndim: int = 2) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name}: contains NaN or Inf")
    return arr


def as_row_vector(x, name: str = "vector") -> np.ndarray:
    return as_matrix(x, name, ndim=1)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def row_softmax(x) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    x = np.asarray(x, dtype=DTYPE)
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def clip_row_norms(v, c: float) -> np.ndarray:
    """Rescale rows whose l2 norm exceeds ``c`` down to norm exactly ``c``.

    Rows already inside the ball are returned untouched (bitwise), which makes
    the operation idempotent.
    """
    if not c > 0:
        raise ParameterError(f"norm bound must be positive, got {c}")
    v = np.array(v, dtype=DTYPE, copy=True)
    if v.ndim == 1:
        return clip_row_norms(v[None, :], c)[0]
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    over = norms > c
    if np.any(over):
        v[over] *= (c / norms[over])[:, None]
        # rounding can leave a rescaled row an ulp above c
        idx = np.flatnonzero(over)
        while idx.size:
            renorm = np.sqrt(np.einsum("ij,ij->i", v[idx], v[idx]))
            idx = idx[renorm > c]
            v[idx] *= 1.0 - 2.0**-52
    return v


def row_norms(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.sqrt(np.einsum("ij,ij->i", x, x))
