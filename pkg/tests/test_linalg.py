import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from incline import linalg
from incline.errors import DegenerateData, DimensionMismatch, NotPositiveDefinite


def gd_oracle(S, T, iters=20000):
    """Plain gradient descent on sum ||W s_i - t_i||^2; independent of the Cholesky path."""
    d = S.shape[1]
    W = np.zeros((d, d))
    lr = 1.0 / np.linalg.norm(S, 2) ** 2
    for _ in range(iters):
        W -= lr * (W @ S.T - T.T) @ S
    return W


def eq1(W, S, T):
    return float(np.sum((S @ W.T - T) ** 2))


# --- solve_spd -------------------------------------------------------------------


def test_solve_identity():
    X = linalg.solve_spd(np.eye(2), [[3.0], [4.0]])
    assert np.array_equal(X, [[3.0], [4.0]])


def test_solve_diagonal_inverse():
    X = linalg.solve_spd([[4.0, 0], [0, 9.0]], np.eye(2))
    np.testing.assert_allclose(X, [[0.25, 0], [0, 1 / 9]], rtol=0, atol=1e-15)


def test_solve_substitution_check():
    A = np.array([[2.0, 1], [1, 2]])
    X = linalg.solve_spd(A, [[1.0], [1.0]])
    np.testing.assert_allclose(X, [[1 / 3], [1 / 3]], atol=1e-15)
    np.testing.assert_allclose(A @ X, [[1.0], [1.0]], atol=1e-15)


def test_solve_vector_rhs_keeps_shape():
    x = linalg.solve_spd([[2.0, 1], [1, 2]], [1.0, 1.0])
    assert x.shape == (2,)


def test_solve_rejects_indefinite_and_asymmetric():
    with pytest.raises(NotPositiveDefinite):
        linalg.solve_spd([[1.0, 2], [2, 1]], [1.0, 1.0])
    with pytest.raises(NotPositiveDefinite):
        linalg.solve_spd([[2.0, 1], [0, 2]], [1.0, 1.0])
    with pytest.raises(NotPositiveDefinite):
        linalg.solve_spd(np.zeros((3, 3)), np.ones(3))


def test_solve_shape_errors():
    with pytest.raises(DimensionMismatch):
        linalg.solve_spd(np.eye(2), np.ones((3, 1)))
    with pytest.raises(DimensionMismatch):
        linalg.solve_spd(np.ones((2, 3)), np.ones((2, 1)))


def test_solve_residual_bound_random_systems(rng):
    for _ in range(100):
        d = int(rng.integers(1, 65))
        m = int(rng.integers(1, 5))
        M = rng.standard_normal((d, d))
        A = M @ M.T + d * np.eye(d)
        B = rng.standard_normal((d, m))
        X = linalg.solve_spd(A, B)
        assert np.linalg.norm(A @ X - B) <= 1e-8 * (1 + np.linalg.norm(B))


# --- fit_linear_map ----------------------------------------------------------------


def test_fit_identity_pairing():
    W = linalg.fit_linear_map(np.eye(4), np.eye(4))
    np.testing.assert_allclose(W, np.eye(4), atol=1e-10)


def test_fit_rotation_matches_gd():
    S = np.array([[1.0, 0], [0, 1]])
    T = np.array([[0.0, 1], [-1, 0]])
    W = linalg.fit_linear_map(S, T)
    np.testing.assert_allclose(W, [[0, -1], [1, 0]], atol=1e-9)
    np.testing.assert_allclose(gd_oracle(S, T, 200), W, atol=1e-9)


def test_fit_scalar_regression_hand_oracle():
    S = np.array([[1.0], [2.0], [3.0]])
    T = np.array([[2.0], [3.9], [6.1]])
    W = linalg.fit_linear_map(S, T)
    assert abs(W[0, 0] - 28.1 / 14) < 1e-12


def test_fit_is_column_convention(rng):
    A = rng.standard_normal((5, 5))
    S = rng.standard_normal((30, 5))
    W = linalg.fit_linear_map(S, S @ A.T)
    h = rng.standard_normal(5)
    np.testing.assert_allclose(W @ h, A @ h, atol=1e-10)


def test_fit_optimality_vs_gd(rng):
    for _ in range(5):
        S = rng.standard_normal((40, 16))
        T = rng.standard_normal((40, 16))
        W = linalg.fit_linear_map(S, T)
        assert eq1(W, S, T) <= eq1(gd_oracle(S, T, 5000), S, T) + 1e-6


def test_fit_escalates_on_rank_deficiency():
    S = np.array([[1.0, 2.0, 3.0]])
    W, used = linalg.fit_linear_map(S, S, full_output=True)
    assert used > 0
    tau = np.trace(S.T @ S) / 3
    assert any(abs(used - c * tau) <= 1e-15 * tau for c in linalg.RIDGE_ESCALATION)
    assert np.all(np.isfinite(W))


def test_fit_full_rank_uses_no_ridge(rng):
    S = rng.standard_normal((20, 4))
    _, used = linalg.fit_linear_map(S, S, full_output=True)
    assert used == 0.0


def test_fit_relative_ridge(rng):
    S = rng.standard_normal((20, 4))
    T = rng.standard_normal((20, 4))
    tau = np.trace(S.T @ S) / 4
    W1, r1 = linalg.fit_linear_map(S, T, full_output=True, ridge_rel=0.5)
    W2, r2 = linalg.fit_linear_map(S, T, ridge=0.5 * tau, full_output=True)
    assert r1 == pytest.approx(r2, rel=1e-15)
    np.testing.assert_allclose(W1, W2, rtol=1e-12)


def test_fit_errors():
    with pytest.raises(DegenerateData):
        linalg.fit_linear_map(np.zeros((3, 2)), np.ones((3, 2)))
    with pytest.raises(DimensionMismatch):
        linalg.fit_linear_map(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        linalg.fit_linear_map(np.ones((3, 2)), np.ones((3, 2)), ridge=-1.0)
    with pytest.raises(ValueError):
        linalg.fit_linear_map([[np.nan, 1.0]], [[1.0, 1.0]])


def test_residual_matches_recomputation(rng):
    S = rng.standard_normal((25, 6))
    T = rng.standard_normal((25, 6))
    W = linalg.fit_linear_map(S, T)
    assert abs(linalg.residual(W, S, T) - eq1(W, S, T) / 25) <= 1e-10


def test_text_roundtrip_bit_exact(rng):
    M = rng.standard_normal((3, 7)) * 10.0 ** rng.integers(-300, 300, (3, 7))
    assert np.array_equal(linalg.from_text(linalg.to_text(M)), M)


# --- properties -------------------------------------------------------------------

dims = st.integers(1, 6)


@st.composite
def full_rank_problem(draw):
    d = draw(dims)
    n = draw(st.integers(d + 5, d + 20))
    seed = draw(st.integers(0, 2**32 - 1))
    r = np.random.default_rng(seed)
    return r.standard_normal((n, d)), r.standard_normal((d, d)), r.standard_normal((n, d))


@given(full_rank_problem())
def test_property_exact_recovery(problem):
    S, A, _ = problem
    W = linalg.fit_linear_map(S, S @ A.T)
    assert np.linalg.norm(W - A) <= 1e-8 * max(1.0, np.linalg.norm(A))


@given(full_rank_problem())
def test_property_normal_equations_hold(problem):
    S, _, T = problem
    W = linalg.fit_linear_map(S, T)
    grad = (S @ W.T - T).T @ S
    assert np.linalg.norm(grad) <= 1e-9 * (1 + np.linalg.norm(S) ** 2 * np.linalg.norm(T))


@given(full_rank_problem(), st.floats(0, 10), st.floats(0, 10))
def test_property_ridge_monotone(problem, r1, r2):
    S, _, T = problem
    lo, hi = sorted((r1, r2))
    w_lo = np.linalg.norm(linalg.fit_linear_map(S, T, lo))
    w_hi = np.linalg.norm(linalg.fit_linear_map(S, T, hi))
    assert w_hi <= w_lo * (1 + 1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e6, 1e6)))
def test_property_matrix_text_roundtrip(M):
    assert np.array_equal(linalg.from_text(linalg.to_text(M)), M)
