# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the Kronecker and PHM kernels.

Every function writes into caller-provided buffers; allocation happens in
:mod:`kpft.backend` so the allocation probe sees all of it.
"""

ctypedef fused real:
    float
    double


def kron(real[:, ::1] a, real[:, ::1] b, real[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0], f = a.shape[1]
    cdef Py_ssize_t p = b.shape[0], q = b.shape[1]
    cdef Py_ssize_t i, j, r, c
    cdef real aij
    with nogil:
        for i in range(m):
            for r in range(p):
                for j in range(f):
                    aij = a[i, j]
                    for c in range(q):
                        out[i * p + r, j * q + c] = aij * b[r, c]


def phm_forward(real[:, :, ::1] a_set, real[:, :, ::1] b_set,
                real[:, ::1] x, real[:, ::1] out, real[:, ::1] z):
    """out[row] = x[row] . sum_i kron(A_i, B_i), with z an (n, d/n) scratch."""
    cdef Py_ssize_t n = a_set.shape[0]
    cdef Py_ssize_t p = b_set.shape[1], q = b_set.shape[2]
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t row, i, a, b, pp, qq
    cdef real acc, coef
    with nogil:
        for row in range(rows):
            for b in range(n * q):
                out[row, b] = 0
            for i in range(n):
                for a in range(n):
                    for qq in range(q):
                        acc = 0
                        for pp in range(p):
                            acc = acc + x[row, a * p + pp] * b_set[i, pp, qq]
                        z[a, qq] = acc
                for a in range(n):
                    for b in range(n):
                        coef = a_set[i, a, b]
                        for qq in range(q):
                            out[row, b * q + qq] += coef * z[a, qq]


def phm_backward(real[:, :, ::1] a_set, real[:, :, ::1] b_set,
                 real[:, ::1] x, real[:, ::1] g,
                 real[:, :, ::1] ga, real[:, :, ::1] gb, real[:, ::1] gx,
                 real[:, ::1] z, real[:, ::1] gz):
    """Accumulate gradients of the PHM product into zeroed ga, gb, gx."""
    cdef Py_ssize_t n = a_set.shape[0]
    cdef Py_ssize_t p = b_set.shape[1], q = b_set.shape[2]
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t row, i, a, b, pp, qq
    cdef real acc
    with nogil:
        for row in range(rows):
            for i in range(n):
                for a in range(n):
                    for qq in range(q):
                        acc = 0
                        for pp in range(p):
                            acc = acc + x[row, a * p + pp] * b_set[i, pp, qq]
                        z[a, qq] = acc
                        acc = 0
                        for b in range(n):
                            acc = acc + a_set[i, a, b] * g[row, b * q + qq]
                        gz[a, qq] = acc
                for a in range(n):
                    for b in range(n):
                        acc = 0
                        for qq in range(q):
                            acc = acc + z[a, qq] * g[row, b * q + qq]
                        ga[i, a, b] += acc
                for a in range(n):
                    for pp in range(p):
                        acc = 0
                        for qq in range(q):
                            acc = acc + gz[a, qq] * b_set[i, pp, qq]
                            gb[i, pp, qq] += x[row, a * p + pp] * gz[a, qq]
                        gx[row, a * p + pp] += acc
