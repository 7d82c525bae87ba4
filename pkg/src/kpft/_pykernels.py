"""Pure numpy implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` module: results go into
caller-provided buffers. Used when the extension is not built, or when
``KPFT_BACKEND=python`` is set.
"""

import numpy as np

from kpft import _alloc


def kron(a, b, out):
    m, f = a.shape
    p, q = b.shape
    # out viewed as (m, p, f, q): block (i, j) is a[i, j] * b
    np.multiply(a[:, None, :, None], b[None, :, None, :], out=out.reshape(m, p, f, q))


def _blocks(a_set, b_set, x):
    n = a_set.shape[0]
    p, q = b_set.shape[1:]
    xb = x.reshape(x.shape[0], n, p)
    # z[i, row, a, :] = x_block_a[row] @ B_i
    z = _alloc.note(np.matmul(xb[None], b_set[:, None]))
    return xb, z


def phm_forward(a_set, b_set, x, out, z=None):
    n = a_set.shape[0]
    q = b_set.shape[2]
    _, zz = _blocks(a_set, b_set, x)
    y = _alloc.note(np.einsum("iab,inaq->nbq", a_set, zz))
    out[...] = y.reshape(x.shape[0], n * q)


def phm_backward(a_set, b_set, x, g, ga, gb, gx, z=None, gz=None):
    n = a_set.shape[0]
    q = b_set.shape[2]
    xb, zz = _blocks(a_set, b_set, x)
    gr = g.reshape(g.shape[0], n, q)
    gzz = _alloc.note(np.einsum("iab,nbq->inaq", a_set, gr))
    ga += np.einsum("inaq,nbq->iab", zz, gr)
    gb += np.einsum("nap,inaq->ipq", xb, gzz)
    gx += _alloc.note(np.einsum("inaq,ipq->nap", gzz, b_set)).reshape(gx.shape)
