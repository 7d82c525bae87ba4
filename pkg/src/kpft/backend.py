"""Kernel backend selection.

The compiled extension (``kpft._kernels``) is preferred; the numpy fallback in
``kpft._pykernels`` is used when the extension is missing or when the
environment variable ``KPFT_BACKEND=python`` is set at import time.
"""

import os
from contextlib import contextmanager

import numpy as np

from kpft import _alloc, _pykernels

try:
    from kpft import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def _default():
    wanted = os.environ.get("KPFT_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise RuntimeError(f"KPFT_BACKEND={wanted!r} is not available; have {sorted(BACKENDS)}")
        return wanted
    return "cython" if "cython" in BACKENDS else "python"


_active = _default()


def active():
    return _active


def available():
    return sorted(BACKENDS)


def set_backend(name):
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(BACKENDS)}")
    _active = name


@contextmanager
def use(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _common(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays], dtype


def kron(a, b):
    (a, b), dtype = _common(a, b)
    out = _alloc.empty((a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]), dtype)
    BACKENDS[_active].kron(a, b, out)
    return out


def phm_forward(a_set, b_set, x):
    """x (rows, k) times sum_i kron(A_i, B_i), never forming the k x d weight."""
    (a_set, b_set, x), dtype = _common(a_set, b_set, x)
    n, _, q = b_set.shape
    out = _alloc.empty((x.shape[0], n * q), dtype)
    z = _alloc.empty((n, q), dtype)
    BACKENDS[_active].phm_forward(a_set, b_set, x, out, z)
    return out


def phm_backward(a_set, b_set, x, g):
    """Return (grad A_set, grad B_set, grad x) for upstream gradient g (rows, d)."""
    (a_set, b_set, x, g), dtype = _common(a_set, b_set, x, g)
    n, _, q = b_set.shape
    ga = _alloc.zeros(a_set.shape, dtype)
    gb = _alloc.zeros(b_set.shape, dtype)
    gx = _alloc.zeros(x.shape, dtype)
    z = _alloc.empty((n, q), dtype)
    gz = _alloc.empty((n, q), dtype)
    BACKENDS[_active].phm_backward(a_set, b_set, x, g, ga, gb, gx, z, gz)
    return ga, gb, gx
