# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sparse Laplacian kernel.

Rows are processed in fixed order and neighbour terms are accumulated in
table order, matching the numpy fallback term by term.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


def lap_combine(const double[:, ::1] x,
                const int64_t[:, ::1] nbr,
                const double[:, ::1] w,
                const double[::1] deg,
                double a, double b,
                double[:, ::1] out,
                const double[:, ::1] z=None, double c=0.0,
                const double[:, ::1] g=None, double d=0.0):
    cdef Py_ssize_t m, n, k
    cdef Py_ssize_t M = x.shape[0]
    cdef Py_ssize_t N = x.shape[1]
    cdef Py_ssize_t K = nbr.shape[1]
    cdef double acc, lx
    cdef bint has_z = z is not None
    cdef bint has_g = g is not None
    if nbr.shape[0] != N or w.shape[0] != N or deg.shape[0] != N:
        raise ValueError("graph tables do not match signal length")
    if out.shape[0] != M or out.shape[1] != N:
        raise ValueError("output shape mismatch")
    if has_z and (z.shape[0] != M or z.shape[1] != N):
        raise ValueError("z shape mismatch")
    if has_g and (g.shape[0] != M or g.shape[1] != N):
        raise ValueError("g shape mismatch")
    with nogil:
        for m in range(M):
            for n in range(N):
                acc = w[n, 0] * x[m, nbr[n, 0]]
                for k in range(1, K):
                    acc = acc + w[n, k] * x[m, nbr[n, k]]
                lx = deg[n] * x[m, n] - acc
                lx = a * lx + b * x[m, n]
                if has_z:
                    lx = lx + c * z[m, n]
                if has_g:
                    lx = lx + d * g[m, n]
                out[m, n] = lx
    return np.asarray(out)
