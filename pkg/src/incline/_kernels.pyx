# cython: language_level=3
"""Compiled linear-algebra kernels.

Every loop accumulates in plain index order with one rounding per multiply
and one per add; ``_pykernels`` mirrors the same order so both backends
return bit-identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def gram(const double[:, ::1] S):
    """Return S^T S accumulated row by row (i ascending)."""
    cdef Py_ssize_t n = S.shape[0], d = S.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double sa
    G_arr = np.zeros((d, d), dtype=np.float64)
    cdef double[:, ::1] G = G_arr
    with nogil:
        for i in range(n):
            for a in range(d):
                sa = S[i, a]
                for b in range(a, d):
                    G[a, b] += sa * S[i, b]
        for a in range(d):
            for b in range(a + 1, d):
                G[b, a] = G[a, b]
    return G_arr


def cross_gram(const double[:, ::1] S, const double[:, ::1] T):
    """Return S^T T accumulated row by row (i ascending)."""
    cdef Py_ssize_t n = S.shape[0], d = S.shape[1], m = T.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double sa
    C_arr = np.zeros((d, m), dtype=np.float64)
    cdef double[:, ::1] C = C_arr
    with nogil:
        for i in range(n):
            for a in range(d):
                sa = S[i, a]
                for b in range(m):
                    C[a, b] += sa * T[i, b]
    return C_arr


def cholesky(const double[:, ::1] A, double tol):
    """Lower Cholesky factor of A.

    Returns ``(L, -1)`` on success or ``(None, j)`` where ``j`` is the first
    column whose pivot is ``<= tol``.
    """
    cdef Py_ssize_t d = A.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, piv
    cdef Py_ssize_t bad = -1
    L_arr = np.zeros((d, d), dtype=np.float64)
    cdef double[:, ::1] L = L_arr
    with nogil:
        for j in range(d):
            s = A[j, j]
            for k in range(j):
                s = s - L[j, k] * L[j, k]
            if not (s > tol):
                bad = j
                break
            piv = sqrt(s)
            L[j, j] = piv
            for i in range(j + 1, d):
                s = A[i, j]
                for k in range(j):
                    s = s - L[i, k] * L[j, k]
                L[i, j] = s / piv
    if bad >= 0:
        return None, bad
    return L_arr, -1


def cho_solve(const double[:, ::1] L, const double[:, ::1] B):
    """Solve (L L^T) X = B by forward then backward substitution."""
    cdef Py_ssize_t d = L.shape[0], m = B.shape[1]
    cdef Py_ssize_t i, k, c
    cdef double s
    Y_arr = np.empty((d, m), dtype=np.float64)
    X_arr = np.empty((d, m), dtype=np.float64)
    cdef double[:, ::1] Y = Y_arr
    cdef double[:, ::1] X = X_arr
    with nogil:
        for c in range(m):
            for i in range(d):
                s = B[i, c]
                for k in range(i):
                    s = s - L[i, k] * Y[k, c]
                Y[i, c] = s / L[i, i]
            for i in range(d - 1, -1, -1):
                s = Y[i, c]
                for k in range(i + 1, d):
                    s = s - L[k, i] * X[k, c]
                X[i, c] = s / L[i, i]
    return X_arr
