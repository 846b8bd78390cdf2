"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Loops are vectorized only along axes that the compiled code treats
independently, so every scalar sees the same sequence of roundings and the
two backends agree bit for bit.
"""

import math

import numpy as np


def gram(S):
    n, d = S.shape
    G = np.zeros((d, d))
    for i in range(n):
        row = S[i]
        G += row[:, None] * row[None, :]
    return G


def cross_gram(S, T):
    n, d = S.shape
    C = np.zeros((d, T.shape[1]))
    for i in range(n):
        C += S[i][:, None] * T[i][None, :]
    return C


def cholesky(A, tol):
    d = A.shape[0]
    L = np.zeros((d, d))
    for j in range(d):
        s = float(A[j, j])
        for k in range(j):
            s = s - L[j, k] * L[j, k]
        if not (s > tol):
            return None, j
        piv = math.sqrt(s)
        L[j, j] = piv
        col = A[j + 1 :, j].copy()
        for k in range(j):
            col -= L[j + 1 :, k] * L[j, k]
        L[j + 1 :, j] = col / piv
    return L, -1


def cho_solve(L, B):
    d = L.shape[0]
    Y = np.empty_like(B)
    X = np.empty_like(B)
    for i in range(d):
        acc = B[i].copy()
        for k in range(i):
            acc -= L[i, k] * Y[k]
        Y[i] = acc / L[i, i]
    for i in range(d - 1, -1, -1):
        acc = Y[i].copy()
        for k in range(i + 1, d):
            acc -= L[k, i] * X[k]
        X[i] = acc / L[i, i]
    return X
