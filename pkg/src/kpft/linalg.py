"""Dense matrix kernel.

Matrices (``Tensor2``) and batched matrices (``Tensor3``) are row-major
(C-contiguous) numpy arrays of dtype float32 or float64. The functions here
validate shapes and then either call numpy or the selected kernel backend.
"""

import numpy as np

from kpft import backend

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


def tensor(data, dtype=np.float64, ndim=2):
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} tensor, got shape {arr.shape}")
    return arr


def _check2(*arrays):
    for a in arrays:
        if not isinstance(a, np.ndarray) or a.ndim != 2:
            raise ShapeError(f"expected a matrix, got {getattr(a, 'shape', type(a))}")


def kron(a, b):
    """Block matrix whose (i, j) block is ``a[i, j] * b``; (m, f) x (p, q) -> (mp, fq)."""
    _check2(a, b)
    return backend.kron(a, b)


def matmul(a, b):
    _check2(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def outer(s, t):
    """Rank-r product ``s @ t`` of s (a, r) and t (r, b)."""
    _check2(s, t)
    if s.shape[1] < 1 or t.shape[0] < 1:
        raise ShapeError("rank dimension must be >= 1")
    if s.shape[1] != t.shape[0]:
        raise ShapeError(f"rank mismatch: {s.shape} vs {t.shape}")
    return s @ t


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return a - b


def scale(a, alpha):
    return a * alpha


def transpose(a):
    _check2(a)
    return np.ascontiguousarray(a.T)


def reshape(a, shape):
    """Row-major reshape; the flat element order is preserved."""
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    return np.ascontiguousarray(a).reshape(shape)


def bmatmul(a, b):
    """Batched product of Tensor3 operands (batch, m, k) @ (batch, k, n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmatmul: {a.shape} @ {b.shape}")
    return np.matmul(a, b)
