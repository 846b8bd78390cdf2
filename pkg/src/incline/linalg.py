"""Dense float64 linear algebra for alignment fitting.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 (row-major,
C-contiguous).  The heavy loops live in :mod:`incline.kernels`, which
accumulates sums in fixed index order so fits are bit-reproducible.
"""

import numpy as np

from . import kernels
from .errors import DegenerateData, DimensionMismatch, NotPositiveDefinite
from .textio import format_matrix, parse_matrix

# Multipliers of trace(S^T S)/d tried, in order, when the Gram matrix is singular.
RIDGE_ESCALATION = (1e-10, 1e-8, 1e-6, 1e-4)

_EPS = np.finfo(np.float64).eps


def as_matrix(x, name="matrix"):
    """Return ``x`` as a C-contiguous finite float64 2-D array."""
    M = np.ascontiguousarray(x, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite values")
    return M


def as_vector(x, name="vector"):
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def matmul(A, B):
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatch(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


def _pivot_tol(A):
    top = float(np.max(np.diag(A))) if A.size else 0.0
    return 10.0 * A.shape[0] * _EPS * max(top, 0.0)


def cholesky(A):
    """Lower-triangular factor of a symmetric positive-definite matrix.

    A pivot at or below ``10 * d * eps * max(diag(A))`` counts as
    non-positive, so numerically singular matrices are rejected rather than
    factored into garbage.
    """
    A = as_matrix(A, "A")
    L, bad = kernels.cholesky(A, _pivot_tol(A))
    if L is None:
        raise NotPositiveDefinite(f"non-positive pivot at column {bad}")
    return L


def solve_spd(A, B):
    """Solve ``A X = B`` for symmetric positive-definite ``A`` via Cholesky.

    ``B`` may be a matrix (d x m) or a vector of length d; the result has
    the same shape as ``B``.
    """
    A = as_matrix(A, "A")
    d = A.shape[0]
    if d < 1 or A.shape[1] != d:
        raise DimensionMismatch(f"A must be square and non-empty, got {A.shape}")
    scale = float(np.max(np.abs(A)))
    if float(np.max(np.abs(A - A.T))) > 1e-9 * max(scale, 1e-300):
        raise NotPositiveDefinite("A is not symmetric")
    vector_rhs = np.ndim(B) == 1
    Bm = as_matrix(np.reshape(B, (-1, 1)) if vector_rhs else B, "B")
    if Bm.shape[0] != d:
        raise DimensionMismatch(f"B has {Bm.shape[0]} rows, A is {d}x{d}")
    X = kernels.cho_solve(cholesky(A), Bm)
    if not np.all(np.isfinite(X)):
        raise NotPositiveDefinite("solution is not finite")
    return X[:, 0] if vector_rhs else X


def fit_linear_map(S, T, ridge=0.0, full_output=False, ridge_rel=0.0):
    """Least-squares map ``W`` (d x d) with ``W @ s_i ~= t_i`` for paired rows.

    Minimizes ``sum_i ||W s_i - t_i||^2 + ridge * ||W||_F^2`` by solving the
    row-stacked normal equations ``(S^T S + ridge I) X = S^T T`` and
    returning ``W = X^T``, so ``W`` acts on column vectors.

    ``ridge_rel`` adds a scale-free penalty ``ridge_rel * trace(S^T S) / d``
    on top of ``ridge``.  When the total penalty is zero and the Gram matrix
    is singular the solve is retried with ridge ``c * trace(S^T S) / d`` for
    ``c`` in :data:`RIDGE_ESCALATION`.  With ``full_output=True`` returns
    ``(W, ridge_used)``.
    """
    S = as_matrix(S, "S")
    T = as_matrix(T, "T")
    if S.shape != T.shape:
        raise DimensionMismatch(f"S {S.shape} and T {T.shape} differ in shape")
    n, d = S.shape
    if n < 1 or d < 1:
        raise DimensionMismatch("need at least one pair and one dimension")
    if ridge < 0 or not np.isfinite(ridge) or ridge_rel < 0 or not np.isfinite(ridge_rel):
        raise ValueError("ridge must be finite and >= 0")
    if not np.any(S):
        raise DegenerateData("all source rows are zero")

    G = kernels.gram(S)
    C = kernels.cross_gram(S, T)
    tau = float(np.trace(G)) / d
    total = float(ridge) + float(ridge_rel) * tau
    if total > 0:
        ladder = [total]
    else:
        ladder = [0.0] + [c * tau for c in RIDGE_ESCALATION]

    diag = np.arange(d)
    for r in ladder:
        A = G.copy()
        A[diag, diag] += r
        L, _ = kernels.cholesky(A, _pivot_tol(A))
        if L is None:
            continue
        X = kernels.cho_solve(L, C)
        if not np.all(np.isfinite(X)):
            continue
        W = np.ascontiguousarray(X.T)
        return (W, r) if full_output else W
    raise NotPositiveDefinite(f"Gram matrix stayed singular up to ridge {ladder[-1]:.3g}")


def residual(W, S, T):
    """Mean squared alignment error ``sum_i ||W s_i - t_i||^2 / N``."""
    S = as_matrix(S, "S")
    T = as_matrix(T, "T")
    R = S @ np.asarray(W).T - T
    return float(np.sum(R * R)) / S.shape[0]


def to_text(M):
    return format_matrix(as_matrix(M))


def from_text(text):
    return parse_matrix(text)
