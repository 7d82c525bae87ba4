"""Allocation probe shared by the kernel backends.

Kernels obtain every buffer through :func:`empty`/:func:`zeros`, so a probe can
assert which shapes a code path allocates (e.g. that the PHM path never builds
the dense k x d weight).
"""

from contextlib import contextmanager

import numpy as np

_probes = []


def empty(shape, dtype):
    for probe in _probes:
        probe.append(tuple(shape))
    return np.empty(shape, dtype=dtype)


def zeros(shape, dtype):
    for probe in _probes:
        probe.append(tuple(shape))
    return np.zeros(shape, dtype=dtype)


def note(arr):
    for probe in _probes:
        probe.append(tuple(arr.shape))
    return arr


@contextmanager
def probe():
    """Collect the shapes of every kernel buffer allocated inside the block."""
    shapes = []
    _probes.append(shapes)
    try:
        yield shapes
    finally:
        _probes.remove(shapes)
