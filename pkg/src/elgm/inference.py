"""Nested Laplace / adaptive Gauss-Hermite inference for ELGMs.

The fitting procedure:

1. maximize the marginal Laplace approximation ``log pi_LA(theta, Y)`` over
   theta, where each evaluation maximizes ``log pi(w, theta, Y)`` over w by
   trust-region Newton and applies the Gaussian correction;
2. take the negative finite-difference Hessian at the mode and the lower
   Cholesky factor ``L`` of its inverse;
3. place a Gauss-Hermite product grid at ``L z + theta_hat`` and solve the
   inner problem at every node.

The approximate posterior of ``w`` is the Gaussian mixture over grid nodes
with weights ``lambda(z)``.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BarycentricInterpolator, PchipInterpolator
from scipy.optimize import brentq
from scipy.special import logsumexp, ndtr

from . import quadrature
from .errors import (
    DegeneratePosteriorError,
    InnerNonConvergenceError,
    NotPositiveDefiniteError,
    OuterNonConvergenceError,
)
from .models import LOG_2PI, grad_w, hessian_w, log_joint
from .numkernels import CholeskyFactor, cholesky, fd_gradient, fd_hessian, trust_region_minimize

log = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.025, 0.5, 0.975)


@dataclass(frozen=True)
class FitConfig:
    k: int = 3
    tol_inner: float = 1e-8
    tol_outer: float = 1e-6
    max_iter: int = 200
    threads: int = 1
    outer_max_radius: float = 4.0


@dataclass
class InnerSolution:
    theta: np.ndarray
    w_hat: np.ndarray
    hessian_factor: CholeskyFactor
    log_laplace: float
    grad_norm: float = 0.0
    iterations: int = 0


@dataclass
class FitResult:
    theta_hat: np.ndarray
    hessian_out: np.ndarray
    cholesky_out: np.ndarray
    grid: quadrature.AdaptedGrid
    inner: list
    log_evidence: float
    config: FitConfig
    theta_names: tuple = ()
    latent_names: tuple = ()
    transform_kinds: tuple = ()
    converged: bool = True
    outer_iterations: int = 0
    outer_grad_norm: float = 0.0
    hessian_jitter: float = 0.0
    timings: dict = field(default_factory=dict)
    model: object = None

    @property
    def s(self):
        return self.theta_hat.size

    @property
    def m(self):
        return self.inner[0].w_hat.size

    @property
    def lam(self):
        return self.grid.lam

    @property
    def node_means(self):
        return np.array([sol.w_hat for sol in self.inner]).reshape(len(self.inner), -1)


@dataclass
class SampleBatch:
    draws: np.ndarray
    node_choice: np.ndarray
    seed: int
    theta: np.ndarray | None = None

    @property
    def B(self):
        return self.draws.shape[0]


def inner_solve(model, theta, warm_start=None, tol=1e-8, max_iter=200):
    """Maximize the log joint over ``w`` at fixed ``theta``.

    Returns the mode, the Cholesky factor of ``H = Q + Z^T C Z`` there, and
    ``log pi_LA(theta, Y) = log pi(w_hat, theta, Y) + (m/2) log 2 pi - 0.5 log|H|``.
    """
    theta = np.asarray(theta, dtype=float)
    m = model.m
    if m == 0:
        val = float(log_joint(model, np.zeros(0), theta))
        return InnerSolution(theta.copy(), np.zeros(0), cholesky(np.zeros((0, 0))), val)

    w0 = np.zeros(m) if warm_start is None else np.asarray(warm_start, dtype=float)
    res = trust_region_minimize(
        lambda w: -log_joint(model, w, theta),
        lambda w: -grad_w(model, w, theta),
        lambda w: hessian_w(model, w, theta),
        w0,
        tol=tol,
        max_iter=max_iter,
    )
    if not res.converged or res.hessian_factor is None:
        raise InnerNonConvergenceError(
            f"inner optimization failed at theta={theta.tolist()} after {res.iterations} "
            f"iterations (gradient norm {res.grad_norm:.3g}; {res.message or 'indefinite Hessian'})",
            theta=theta.copy(),
            iterations=res.iterations,
            grad_norm=res.grad_norm,
        )
    factor = res.hessian_factor
    log_la = -res.fun + 0.5 * m * LOG_2PI - 0.5 * factor.log_det
    return InnerSolution(theta.copy(), res.x, factor, float(log_la), res.grad_norm, res.iterations)


class LaplaceObjective:
    """``theta -> log pi_LA(theta, Y)`` with memoization and warm starts.

    Each new theta starts the inner solve from the mode found at the nearest
    previously evaluated theta.
    """

    def __init__(self, model, tol=1e-8, max_iter=200):
        self.model = model
        self.tol = tol
        self.max_iter = max_iter
        self._thetas = []
        self._solutions = {}
        self.evaluations = 0

    def _nearest_mode(self, theta):
        if not self._thetas:
            return None
        d = [float(np.sum((t - theta) ** 2)) for t in self._thetas]
        return self._solutions[self._thetas[int(np.argmin(d))].tobytes()].w_hat

    def solve(self, theta, warm_start=None):
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key in self._solutions:
            return self._solutions[key]
        start = self._nearest_mode(theta) if warm_start is None else warm_start
        sol = inner_solve(self.model, theta, start, self.tol, self.max_iter)
        self._thetas.append(theta.copy())
        self._solutions[key] = sol
        self.evaluations += 1
        return sol

    def __call__(self, theta):
        return self.solve(theta).log_laplace


def laplace_objective(model, theta, cache=None):
    """Value of ``log pi_LA(theta, Y)``; ``cache`` is an optional :class:`LaplaceObjective`."""
    if cache is None:
        cache = LaplaceObjective(model)
    return cache(theta)


def _solve_nodes(model, nodes, warm_start, config):
    def one(theta):
        return inner_solve(model, theta, warm_start, config.tol_inner, config.max_iter)

    if config.threads > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(one, list(nodes)))
    return [one(t) for t in nodes]


def fit(model, config=None, **overrides):
    """Run the full approximation and return a :class:`FitResult`."""
    config = config or FitConfig()
    if overrides:
        config = FitConfig(**{**config.__dict__, **overrides})
    t_start = time.perf_counter()
    s = model.s
    objective = LaplaceObjective(model, config.tol_inner, config.max_iter)
    rule = quadrature.product_rule(s, config.k)
    timings = {}

    outer_iterations = 0
    outer_grad = 0.0
    jitter = 0.0
    if s == 0:
        theta_hat = np.zeros(0)
        H_out = np.zeros((0, 0))
        L = np.zeros((0, 0))
    else:
        def neg(t):
            return -objective(t)

        res = trust_region_minimize(
            neg,
            lambda t: fd_gradient(neg, t),
            lambda t: fd_hessian(neg, t, f0=neg(t)),
            model.initial_theta(),
            tol=config.tol_outer,
            max_iter=config.max_iter,
            max_radius=config.outer_max_radius,
        )
        outer_iterations, outer_grad = res.iterations, res.grad_norm
        if not res.converged:
            raise OuterNonConvergenceError(
                f"outer optimization did not converge ({res.message}); "
                f"gradient norm {res.grad_norm:.3g} at theta={res.x.tolist()}"
            )
        theta_hat = res.x
        H_out = fd_hessian(neg, theta_hat, f0=neg(theta_hat))
        try:
            h_factor = cholesky(H_out)
        except NotPositiveDefiniteError as exc:
            raise DegeneratePosteriorError("curvature of log pi_LA at the mode is not positive definite") from exc
        jitter = h_factor.jitter_applied
        L = cholesky(h_factor.inverse()).L
    timings["outer"] = time.perf_counter() - t_start

    t_nodes = time.perf_counter()
    points, _ = quadrature.adapt(rule, theta_hat, L)
    center = objective.solve(theta_hat)
    inner = _solve_nodes(model, points, center.w_hat, config)
    log_values = np.array([sol.log_laplace for sol in inner])
    log_det_L = float(np.sum(np.log(np.diag(L)))) if s else 0.0
    lam = quadrature.normalize_lambda(log_values, rule.weights, log_det_L)
    log_evidence = float(logsumexp(log_values + np.log(rule.weights)) + log_det_L)
    timings["nodes"] = time.perf_counter() - t_nodes
    timings["total"] = time.perf_counter() - t_start

    grid = quadrature.AdaptedGrid(
        center=theta_hat, cholesky=L, z=rule.points, nodes=points,
        raw_weights=rule.weights, log_values=log_values, lam=lam,
    )
    return FitResult(
        theta_hat=theta_hat, hessian_out=H_out, cholesky_out=L, grid=grid, inner=inner,
        log_evidence=log_evidence, config=config, theta_names=model.theta_names,
        latent_names=model.latent_names or tuple(f"w[{j}]" for j in range(model.m)),
        transform_kinds=model.transform.kinds, converged=True,
        outer_iterations=outer_iterations, outer_grad_norm=outer_grad, hessian_jitter=jitter,
        timings=timings, model=model,
    )


# ---------------------------------------------------------------------------
# hyperparameter summaries
# ---------------------------------------------------------------------------


def _natural(kind, x):
    return np.exp(x) if kind == "log" else np.asarray(x, dtype=float)


def _weighted_cdf_quantiles(coords, lam, levels):
    """Quantiles from a monotone cubic through the lambda-weighted CDF.

    The CDF at each distinct coordinate is the mass strictly below it plus
    half its own mass; one extra node-spacing on each side anchors 0 and 1.
    """
    xs, inv = np.unique(coords, return_inverse=True)
    mass = np.bincount(inv, weights=lam)
    if xs.size < 2:
        return np.full(len(levels), np.nan)
    cdf = np.cumsum(mass) - 0.5 * mass
    x = np.concatenate([[2 * xs[0] - xs[1]], xs, [2 * xs[-1] - xs[-2]]])
    F = np.concatenate([[0.0], cdf, [1.0]])
    interp = PchipInterpolator(x, F)
    return np.array([brentq(lambda t: interp(t) - q, x[0], x[-1]) for q in levels])


def theta_summaries(fit, levels=QUANTILE_LEVELS):
    """Posterior mean, sd and quantiles for each hyperparameter.

    Rows are produced for the unconstrained coordinate and, for
    transformed coordinates, the natural scale as well. With a single
    support point (k = 1) sd and quantiles are NaN and ``available`` is False.
    """
    rows = []
    lam = fit.grid.lam
    single = len(np.unique(fit.grid.nodes, axis=0)) < 2
    for j, name in enumerate(fit.theta_names):
        coords = fit.grid.nodes[:, j]
        kind = fit.transform_kinds[j] if fit.transform_kinds else "identity"
        scales = [("unconstrained", name, lambda x: np.asarray(x, dtype=float))]
        if kind == "log":
            nat_name = name[4:] if name.startswith("log_") else f"exp({name})"
            scales.append(("natural", nat_name, np.exp))
        q_unc = np.full(len(levels), np.nan) if single else _weighted_cdf_quantiles(coords, lam, levels)
        for scale, label, g in scales:
            vals = g(coords)
            mean = float(np.sum(lam * vals))
            sd = float(np.sqrt(max(np.sum(lam * (vals - mean) ** 2), 0.0))) if not single else float("nan")
            rows.append({
                "name": label, "scale": scale, "mean": mean, "sd": sd,
                "quantiles": g(q_unc) if not single else q_unc, "levels": tuple(levels),
                "available": not single,
            })
    return rows


@dataclass
class ThetaMarginal:
    """Continuous marginal of one hyperparameter on a fine grid."""

    index: int
    theta: np.ndarray
    density: np.ndarray
    cdf: np.ndarray

    def ppf(self, u):
        return np.interp(u, self.cdf, self.theta)

    def cdf_at(self, x):
        return np.interp(x, self.theta, self.cdf, left=0.0, right=1.0)


def _barycentric_weights(x):
    """Weights ``1 / prod_{k != j} (x_j - x_k)`` for sorted ``x``, rescaled to max 1.

    Passed explicitly because scipy otherwise shuffles the nodes with the
    global random state, which perturbs the last bits between calls.
    """
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    logw = -np.sum(np.log(np.abs(diff)), axis=1)
    sign = (-1.0) ** (x.size - 1 - np.arange(x.size))
    return sign * np.exp(logw - logw.max())


def theta_marginal(fit, j=0, n_grid=2001):
    """Marginal density of ``theta_j`` by interpolating log pi_LA at the nodes.

    The grid is re-adapted with coordinate ``j`` first in the Cholesky order
    so that it depends on ``z_1`` alone; the other coordinates are summed
    out by quadrature. ``log`` of that marginal is interpolated by the
    degree ``k - 1`` polynomial through the ``k`` node values (``k = 1``
    falls back to the Gaussian with the fitted curvature). The density is
    evaluated on ``|z| <= max(max node, 4)``.
    """
    s = fit.s
    if s == 0:
        raise ValueError("model has no hyperparameters")
    k = fit.config.k
    base = quadrature.gauss_hermite_rule(k)
    Hinv = fit.cholesky_out @ fit.cholesky_out.T
    perm = [j] + [i for i in range(s) if i != j]
    if j == 0:
        L, log_values, z = fit.cholesky_out, fit.grid.log_values, fit.grid.z
    else:
        if fit.model is None:
            raise ValueError("re-adapting the grid needs the fitted model")
        Lp = cholesky(Hinv[np.ix_(perm, perm)]).L
        rule = quadrature.product_rule(s, k)
        pts = rule.points @ Lp.T + fit.theta_hat[perm]
        nodes = np.empty_like(pts)
        nodes[:, perm] = pts
        center = fit.inner[fit.grid.mode_index or 0].w_hat
        sols = _solve_nodes(fit.model, nodes, center, fit.config)
        L, log_values, z = Lp, np.array([sol.log_laplace for sol in sols]), rule.points

    scale = L[0, 0]
    zmax = max(float(np.max(np.abs(base.nodes))), 4.0)
    zz = np.linspace(-zmax, zmax, n_grid)
    if k == 1:
        log_dens = -0.5 * zz**2
    else:
        raw = quadrature.product_rule(s, k).weights
        rest = raw / base.weights[np.searchsorted(base.nodes, z[:, 0])]
        first = np.searchsorted(base.nodes, z[:, 0])
        marg = np.array([logsumexp(log_values[first == i] + np.log(rest[first == i])) for i in range(k)])
        marg -= marg.max()
        poly = BarycentricInterpolator(base.nodes, marg, wi=_barycentric_weights(base.nodes))
        log_dens = poly(zz)
    log_dens = log_dens - np.max(log_dens)
    dens = np.exp(log_dens)
    theta = fit.theta_hat[j] + scale * zz
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(theta))])
    total = cdf[-1]
    return ThetaMarginal(j, theta, dens / total, cdf / total)


def sample_theta(fit, B, seed, j=0):
    """Draw ``B`` values of ``theta_j`` from :func:`theta_marginal` by inverse CDF."""
    marg = theta_marginal(fit, j)
    rng = np.random.Generator(np.random.Philox(seed))
    return marg.ppf(rng.random(B))


# ---------------------------------------------------------------------------
# the Gaussian mixture over nodes
# ---------------------------------------------------------------------------


def sample_posterior(fit, B, seed):
    """Independent draws of ``w`` from the nested Gaussian mixture.

    The node is chosen by inverse CDF over ``lambda`` in grid order, then
    ``w = w_hat + L^{-T} eps`` with ``L L^T = H`` at that node. Uses a Philox
    counter-based generator, so draws depend only on ``seed``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    rng = np.random.Generator(np.random.Philox(seed))
    lam = fit.grid.lam
    cum = np.cumsum(lam)
    cum[-1] = 1.0
    u = rng.random(B)
    choice = np.minimum(np.searchsorted(cum, u, side="right"), len(lam) - 1)
    m = fit.m
    eps = rng.standard_normal((B, m))
    draws = np.empty((B, m))
    for idx in np.unique(choice):
        rows = choice == idx
        sol = fit.inner[idx]
        draws[rows] = sol.w_hat + sol.hessian_factor.solve_lower_t(eps[rows].T).T
    return SampleBatch(draws, choice, seed, fit.grid.nodes[choice])


def log_joint_density(fit, w):
    """Log density of the nested mixture at ``w`` (shape ``(m,)`` or ``(B, m)``)."""
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    W = np.atleast_2d(w)
    m = fit.m
    terms = []
    for lam, sol in zip(fit.grid.lam, fit.inner):
        if lam <= 0:
            continue
        r = (W - sol.w_hat) @ sol.hessian_factor.L if m else np.zeros((W.shape[0], 0))
        terms.append(math.log(lam) - 0.5 * m * LOG_2PI + 0.5 * sol.hessian_factor.log_det - 0.5 * np.sum(r * r, axis=1))
    out = logsumexp(np.array(terms), axis=0)
    return float(out[0]) if single else out


def joint_density(fit, w):
    return np.exp(log_joint_density(fit, w))


def mixture_moments(fit):
    """Mean vector and covariance matrix of the nested mixture."""
    lam = fit.grid.lam
    means = fit.node_means
    mean = lam @ means
    cov = np.zeros((fit.m, fit.m))
    for l, sol in zip(lam, fit.inner):
        d = sol.w_hat - mean
        cov += l * (sol.hessian_factor.inverse() + np.outer(d, d))
    return mean, 0.5 * (cov + cov.T)


def latent_summaries(fit, levels=QUANTILE_LEVELS, indices=None):
    """Marginal mean, sd and quantiles of each latent coordinate.

    Quantiles solve ``sum_z lambda(z) Phi((x - mu_z) / s_z) = q`` exactly.
    """
    lam = fit.grid.lam
    keep = lam > 0
    means = fit.node_means[keep]
    sds = np.sqrt(np.array([np.diag(sol.hessian_factor.inverse()) for sol, k_ in zip(fit.inner, keep) if k_]))
    lam = lam[keep]
    rows = []
    idx = range(fit.m) if indices is None else indices
    for i in idx:
        mu, sd = means[:, i], sds[:, i]
        mean = float(lam @ mu)
        var = float(lam @ (sd**2 + (mu - mean) ** 2))
        lo = float(np.min(mu - 12 * sd))
        hi = float(np.max(mu + 12 * sd))
        qs = [brentq(lambda x: float(lam @ ndtr((x - mu) / sd)) - q, lo, hi, xtol=1e-14) for q in levels]
        rows.append({
            "name": fit.latent_names[i], "scale": "latent", "mean": mean, "sd": math.sqrt(var),
            "quantiles": np.array(qs), "levels": tuple(levels), "available": True,
        })
    return rows
