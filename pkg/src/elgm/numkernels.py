"""Dense linear algebra and optimization kernels shared by the inner and outer problems."""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import EvaluationError, InvalidStartError, NotPositiveDefiniteError

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
JITTER_START = 1e-10
JITTER_STEPS = 8
NOISE_REL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray
    log_det: float
    jitter_applied: float = 0.0

    @property
    def dim(self):
        return self.L.shape[0]

    def solve(self, b):
        """Solve ``(L L^T) x = b``."""
        if self.dim == 0:
            return np.zeros_like(b, dtype=float)
        return sla.cho_solve((self.L, True), b)

    def solve_lower_t(self, b):
        """Solve ``L^T x = b``."""
        if self.dim == 0:
            return np.zeros_like(b, dtype=float)
        return sla.solve_triangular(self.L, b, lower=True, trans="T")

    def inverse(self):
        if self.dim == 0:
            return np.zeros((0, 0))
        Linv = sla.solve_triangular(self.L, np.eye(self.dim), lower=True)
        inv = Linv.T @ Linv
        return 0.5 * (inv + inv.T)


@dataclass
class TrustRegionResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    hessian_factor: CholeskyFactor | None
    iterations: int
    converged: bool
    message: str = ""


def _dense(A):
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A, dtype=float)


def cholesky(A):
    """Lower Cholesky factor of a symmetric matrix with jitter escalation.

    On failure the diagonal is shifted by ``1e-10 * mean(diag(A))``, then
    ten times that, up to eight times. Raises
    :class:`NotPositiveDefiniteError` if every attempt fails.
    """
    A = _dense(A)
    m = A.shape[0]
    if A.shape != (m, m):
        raise ValueError("matrix must be square")
    if m == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0, 0.0)
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    jitter = 0.0
    base = np.mean(np.diag(A))
    if not base > 0:
        base = scale
    pivot = None
    for attempt in range(JITTER_STEPS + 1):
        M = A if jitter == 0.0 else A + jitter * np.eye(m)
        L, info = sla.lapack.dpotrf(M, lower=1, clean=1)
        if info == 0:
            d = np.diag(L)
            if np.all(d > 0):
                if jitter:
                    log.debug("cholesky needed jitter %.3g", jitter)
                return CholeskyFactor(L, float(2.0 * np.sum(np.log(d))), jitter)
        pivot = int(info) - 1 if info > 0 else None
        jitter = JITTER_START * base * 10.0**attempt
    raise NotPositiveDefiniteError(
        f"matrix is not positive definite (failing pivot {pivot}) after jitter escalation",
        pivot=pivot,
    )


def _dogleg(g, H, p_newton, radius):
    """Dogleg step inside a ball of ``radius``."""
    if p_newton is not None and np.linalg.norm(p_newton) <= radius:
        return p_newton
    gHg = float(g @ H @ g)
    gnorm = np.linalg.norm(g)
    if gHg <= 0.0:
        return -radius * g / gnorm
    p_cauchy = -(g @ g) / gHg * g
    if p_newton is None or np.linalg.norm(p_cauchy) >= radius:
        return -radius * g / gnorm if np.linalg.norm(p_cauchy) >= radius else p_cauchy
    # walk from the Cauchy point toward the Newton point until the boundary
    d = p_newton - p_cauchy
    a = d @ d
    b = 2.0 * (p_cauchy @ d)
    c = p_cauchy @ p_cauchy - radius**2
    tau = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return p_cauchy + tau * d


def trust_region_minimize(fun, grad, hess, x0, tol=1e-8, max_iter=200, radius=None, max_radius=1e10):
    """Minimize ``fun`` by a Newton dogleg trust-region method.

    Parameters
    ----------
    fun, grad, hess : callable
        Objective, gradient and (dense or sparse) Hessian of ``x``.
    x0 : array_like
        Starting point; the objective must be finite there.
    tol : float
        Stop once the gradient infinity norm is at most ``tol``.
    radius : float, optional
        Initial trust radius. Defaults to the length of the first Newton step.

    Steps are accepted on sufficient decrease. Once predicted and actual
    changes both fall below ``1e-10 * |f|``, a step is accepted only if it
    lowers the gradient norm, so ``f`` may move by rounding-level amounts.

    Returns
    -------
    TrustRegionResult
        ``converged`` is False when ``max_iter`` was reached or the radius
        collapsed before the gradient test passed.
    """
    x = np.array(x0, dtype=float)
    f = float(fun(x))
    if not np.isfinite(f):
        raise InvalidStartError(f"objective is not finite at the starting point ({f})")
    g = np.asarray(grad(x), dtype=float)
    H = _dense(hess(x))
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    it = 0
    message = ""
    while True:
        if gnorm <= tol:
            converged = True
            break
        if it >= max_iter:
            converged, message = False, "iteration limit reached"
            break
        try:
            factor = cholesky(H)
            p_newton = -factor.solve(g)
        except NotPositiveDefiniteError:
            p_newton = None
        if radius is None:
            radius = min(np.linalg.norm(p_newton), max_radius) if p_newton is not None else 1.0
        p = _dogleg(g, H, p_newton, radius)
        pnorm = np.linalg.norm(p)
        pred = -float(g @ p + 0.5 * p @ H @ p)
        x_new = x + p
        f_new = float(fun(x_new))
        actual = f - f_new if np.isfinite(f_new) else -np.inf
        rho = actual / pred if pred > 0 else -np.inf
        # Objectives summing many large terms carry rounding well above
        # eps*|f|; below this level f cannot rank nearby points.
        noise = NOISE_REL * max(1.0, abs(f))

        accept = rho > 1e-4 and actual >= 0.0
        g_new = None
        if not accept and np.isfinite(f_new) and pred <= noise and actual >= -noise:
            # change below resolution: accept only if the gradient improves
            g_new = np.asarray(grad(x_new), dtype=float)
            accept = np.max(np.abs(g_new)) < gnorm

        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75 and pnorm >= 0.99 * radius:
            radius = min(2.0 * radius, max_radius)
        it += 1
        if accept:
            x, f = x_new, f_new
            g = g_new if g_new is not None else np.asarray(grad(x), dtype=float)
            H = _dense(hess(x))
            gnorm = float(np.max(np.abs(g)))
        elif radius < 1e-14 * (1.0 + np.linalg.norm(x)):
            converged, message = False, "trust radius collapsed"
            break

    try:
        factor = cholesky(H)
    except NotPositiveDefiniteError:
        factor = None
    return TrustRegionResult(x, f, gnorm, factor, it, converged, message)


def _checked(f, x):
    val = float(f(x))
    if not np.isfinite(val):
        raise EvaluationError(f"function is not finite at {x.tolist()}", point=x.copy())
    return val


def fd_gradient(f, theta):
    """Central-difference gradient with step ``cbrt(eps) * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.size)
    h = np.cbrt(EPS) * np.maximum(1.0, np.abs(theta))
    for j in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h[j]
        tm[j] -= h[j]
        g[j] = (_checked(f, tp) - _checked(f, tm)) / (tp[j] - tm[j])
    return g


def fd_hessian(f, theta, f0=None):
    """Central second-difference Hessian with step ``eps**0.25 * max(1, |theta_j|)``.

    The result is exactly symmetric.
    """
    theta = np.asarray(theta, dtype=float)
    s = theta.size
    H = np.zeros((s, s))
    h = EPS**0.25 * np.maximum(1.0, np.abs(theta))
    f0 = _checked(f, theta) if f0 is None else f0

    def at(i, si, j=None, sj=0):
        t = theta.copy()
        t[i] += si * h[i]
        if j is not None:
            t[j] += sj * h[j]
        return _checked(f, t)

    for i in range(s):
        H[i, i] = (at(i, 1) - 2.0 * f0 + at(i, -1)) / h[i] ** 2
        for j in range(i):
            H[i, j] = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) / (4 * h[i] * h[j])
            H[j, i] = H[i, j]
    return H
