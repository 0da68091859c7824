import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

import oracles
from elgm.errors import EvaluationError, InvalidStartError, NotPositiveDefiniteError
from elgm.numkernels import cholesky, fd_gradient, fd_hessian, trust_region_minimize

# frozen from oracles.tr_example_root (200 bisection halvings at 50 digits)
TR_ROOT = -0.28711154723350206


def test_oracle_reproduces_frozen_root():
    assert float(oracles.tr_example_root()) == pytest.approx(TR_ROOT, abs=1e-16)


def test_cholesky_identity():
    f = cholesky(np.eye(3))
    np.testing.assert_array_equal(f.L, np.eye(3))
    assert f.log_det == 0.0 and f.jitter_applied == 0.0


def test_cholesky_hand_example():
    f = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(f.L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=1e-15)
    assert f.log_det == pytest.approx(math.log(8.0), rel=1e-15)


def test_cholesky_indefinite_raises_with_pivot():
    with pytest.raises(NotPositiveDefiniteError) as info:
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert info.value.pivot == 1


def test_cholesky_jitter_repairs_singular():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    f = cholesky(A)
    assert f.jitter_applied > 0
    assert np.max(np.abs(f.L @ f.L.T - (A + f.jitter_applied * np.eye(2)))) <= 1e-8 * np.max(np.abs(A))


def test_cholesky_accepts_sparse_and_rejects_asymmetric():
    f = cholesky(sp.csr_matrix(np.array([[4.0, 2.0], [2.0, 3.0]])))
    assert f.log_det == pytest.approx(math.log(8.0))
    with pytest.raises(ValueError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_cholesky_solves_and_inverse():
    A = np.array([[4.0, 2.0, 0.5], [2.0, 3.0, 0.1], [0.5, 0.1, 2.0]])
    f = cholesky(A)
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(A @ f.solve(b), b, rtol=1e-13)
    np.testing.assert_allclose(f.L.T @ f.solve_lower_t(b), b, rtol=1e-13)
    np.testing.assert_allclose(f.inverse() @ A, np.eye(3), atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31 - 1))
def test_cholesky_roundtrip_property(m, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, m + 5))
    A = X @ X.T / (m + 5) + 0.1 * np.eye(m)
    f = cholesky(A)
    assert f.jitter_applied == 0.0
    assert np.all(np.diag(f.L) > 0)
    assert np.max(np.abs(f.L @ f.L.T - A)) / np.max(np.abs(A)) <= 1e-10


def _quadratic(A, a):
    return (lambda w: 0.5 * (w - a) @ A @ (w - a), lambda w: A @ (w - a), lambda w: A)


def test_tr_quadratic_two_iterations():
    a = np.array([1.5, -2.0, 0.25])
    f, g, h = _quadratic(np.eye(3), a)
    res = trust_region_minimize(f, g, h, np.array([10.0, 10.0, -10.0]))
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.x, a, atol=1e-12)


def test_tr_logistic_example_matches_bisection():
    f = lambda w: 10 * np.logaddexp(0.0, w[0]) - 4 * w[0] + 0.5 * w[0] ** 2
    g = lambda w: np.array([10 * expit(w[0]) - 4 + w[0]])
    h = lambda w: np.array([[10 * expit(w[0]) * (1 - expit(w[0])) + 1]])
    res = trust_region_minimize(f, g, h, np.zeros(1), tol=1e-12)
    assert res.converged
    assert abs(res.x[0] - TR_ROOT) <= 1e-10


def test_tr_quartic_flat_hessian():
    res = trust_region_minimize(
        lambda w: w[0] ** 4, lambda w: np.array([4 * w[0] ** 3]), lambda w: np.array([[12 * w[0] ** 2]]), np.ones(1), tol=1e-8
    )
    assert res.converged and abs(res.x[0]) <= 1e-2 and res.grad_norm <= 1e-8


def test_tr_invalid_start():
    with pytest.raises(InvalidStartError):
        trust_region_minimize(lambda w: np.inf, lambda w: w, lambda w: np.eye(1), np.zeros(1))


def test_tr_iteration_cap_reports_nonconvergence():
    f = lambda w: np.sum(np.cosh(w))
    res = trust_region_minimize(f, lambda w: np.sinh(w), lambda w: np.diag(np.cosh(w)), np.full(2, 30.0), max_iter=2)
    assert not res.converged and res.iterations == 2
    assert res.grad_norm > 1e-8


def test_tr_indefinite_start_uses_dogleg_fallback():
    # Rosenbrock: Hessian indefinite at some iterates
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    g = lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    h = lambda x: np.array([[2 - 400 * x[1] + 1200 * x[0] ** 2, -400 * x[0]], [-400 * x[0], 200.0]])
    res = trust_region_minimize(f, g, h, np.array([-1.2, 1.0]), tol=1e-9)
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)


@st.composite
def convex_quadratic(draw):
    m = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, m))
    A = X @ X.T + np.eye(m) * draw(st.floats(0.05, 5.0))
    return A, rng.normal(0, 3, m), rng.normal(0, 10, m)


@settings(max_examples=60, deadline=None)
@given(convex_quadratic())
def test_tr_exact_on_convex_quadratics(q):
    A, a, w0 = q
    f, g, h = _quadratic(A, a)
    res = trust_region_minimize(f, g, h, w0, tol=1e-10)
    assert res.converged and res.iterations <= 3
    assert np.max(np.abs(res.x - a)) <= 1e-10 * max(1.0, np.max(np.abs(a)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tr_accepted_iterates_never_increase(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(0, 2, 3)
    history = []

    def f(w):
        val = float(np.sum(np.logaddexp(0, w) - c * w) + 0.05 * w @ w + 0.25 * np.sum(w**4))
        return val

    def g(w):
        history.append(w.copy())
        return expit(w) - c + 0.1 * w + w**3

    h = lambda w: np.diag(expit(w) * (1 - expit(w)) + 0.1 + 3 * w**2)
    res = trust_region_minimize(f, g, h, rng.normal(0, 3, 3))
    values = [f(w) for w in history]
    assert res.converged
    assert all(b <= a + 1e-10 * max(1.0, abs(a)) for a, b in zip(values, values[1:]))


def test_fd_gradient_examples():
    assert fd_gradient(lambda t: t[0] ** 2, np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-7)
    assert fd_gradient(lambda t: math.sin(t[0]), np.array([0.7]))[0] == pytest.approx(math.cos(0.7), abs=1e-7)
    np.testing.assert_allclose(fd_gradient(lambda t: 4.2, np.array([1.0, -3.0])), 0.0, atol=1e-10)


def test_fd_hessian_examples():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    H = fd_hessian(lambda t: 0.5 * t @ A @ t, np.array([0.3, -0.7]))
    np.testing.assert_allclose(H, A, atol=1e-4)
    H = fd_hessian(lambda t: math.exp(t[0] * t[1]), np.zeros(2))
    np.testing.assert_allclose(H, [[0.0, 1.0], [1.0, 0.0]], atol=1e-4)
    H = fd_hessian(lambda t: math.sin(t[0]) * t[1] ** 3 + t[2] * t[0], np.array([0.2, 1.1, -0.4]))
    assert np.array_equal(H, H.T)


def test_fd_errors_carry_point():
    f = lambda t: math.log(t[0]) if t[0] > 0 else float("nan")
    with pytest.raises(EvaluationError) as info:
        fd_gradient(f, np.array([1e-9]))
    assert info.value.point is not None and info.value.point[0] < 0
    with pytest.raises(EvaluationError):
        fd_hessian(f, np.array([1e-9]))
