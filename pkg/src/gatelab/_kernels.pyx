# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi singular values (cyclic row ordering)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

cdef double EPS = np.finfo(np.float64).eps
cdef int MAX_SWEEPS = 80


cdef void _jacobi_rows(double[:, ::1] u) noexcept nogil:
    cdef Py_ssize_t k = u.shape[0], length = u.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double alpha, beta, gamma, zeta, t, c, s, xi, xj
    cdef double tol = length * EPS
    cdef int sweep, rotated
    if length < 1:
        return
    for sweep in range(MAX_SWEEPS):
        rotated = 0
        for i in range(k - 1):
            for j in range(i + 1, k):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for l in range(length):
                    xi = u[i, l]
                    xj = u[j, l]
                    alpha += xi * xi
                    beta += xj * xj
                    gamma += xi * xj
                if fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta == 0.0:
                    t = 1.0
                elif zeta > 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for l in range(length):
                    xi = u[i, l]
                    xj = u[j, l]
                    u[i, l] = c * xi - s * xj
                    u[j, l] = s * xi + c * xj
        if not rotated:
            break


def singular_values_batch(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t batch = a.shape[0], rows = a.shape[1], cols = a.shape[2]
    cdef Py_ssize_t k = min(rows, cols)
    cdef Py_ssize_t b
    if rows <= cols:
        u = a.copy()
    else:
        u = np.ascontiguousarray(np.swapaxes(a, 1, 2))
    cdef double[:, :, ::1] view = u
    for b in range(batch):
        _jacobi_rows(view[b])
    sv = np.sqrt(np.einsum("bkl,bkl->bk", u, u))
    return -np.sort(-sv, axis=1)


def singular_values(a):
    return singular_values_batch(np.asarray(a, dtype=np.float64)[None])[0]
