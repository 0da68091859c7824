"""Extended latent Gaussian models and the built-in exemplars.

A model is the quadruple (likelihood over index sets, design ``Z``, prior
precision ``Q(theta)``, hyperparameter prior). The latent vector is
``w = (u, beta)`` and the additive predictors are ``eta = Z @ w``.
Observation ``i`` depends on ``eta[J_i]`` only, which fixes the sparsity of
the likelihood curvature ``C_eta``.

Likelihood callbacks take ``eta`` of shape ``(N,)`` or ``(batch, N)``;
the batched form is what the brute-force oracle uses.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln

from .errors import ModelError
from .numkernels import cholesky

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_BETA_VARIANCE = 1000.0
# Exponential prior on standard deviations with P(sigma > 1) = 1/2
DEFAULT_SD_RATE = math.log(2.0)


class LikelihoodDomainWarning(RuntimeWarning):
    """Raised (as a warning) when the likelihood is evaluated outside its domain."""


class IndexSets:
    """The sets ``J_i`` in compressed-row form."""

    def __init__(self, indptr, indices, n_eta):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n_eta = int(n_eta)

    @classmethod
    def from_lists(cls, sets, n_eta):
        sets = [np.unique(np.asarray(s, dtype=np.int64)) for s in sets]
        indptr = np.concatenate([[0], np.cumsum([len(s) for s in sets])]).astype(np.int64)
        indices = np.concatenate(sets) if sets else np.zeros(0, dtype=np.int64)
        return cls(indptr, indices, n_eta)

    @classmethod
    def singletons(cls, n):
        return cls(np.arange(n + 1), np.arange(n), n)

    def __len__(self):
        return len(self.indptr) - 1

    def __getitem__(self, i):
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def incidence(self):
        """Boolean ``n x N`` incidence matrix."""
        data = np.ones(len(self.indices), dtype=bool)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(len(self), self.n_eta))

    def validate(self):
        sizes = np.diff(self.indptr)
        if np.any(sizes < 1):
            raise ModelError("every index set must be non-empty")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_eta):
            raise ModelError("index set entry out of range")
        covered = np.zeros(self.n_eta, dtype=bool)
        covered[self.indices] = True
        if not covered.all():
            raise ModelError("union of index sets does not cover every additive predictor")


@dataclass(frozen=True)
class Transform:
    """Per-coordinate bijection between natural and unconstrained scales."""

    kinds: tuple = ()

    def to_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.array([math.exp(t) if k == "log" else t for t, k in zip(theta, self.kinds)])

    def to_unconstrained(self, natural):
        natural = np.asarray(natural, dtype=float)
        return np.array([math.log(x) if k == "log" else x for x, k in zip(natural, self.kinds)])

    def log_jacobian(self, theta):
        """log |d natural / d theta|."""
        return float(sum(t for t, k in zip(theta, self.kinds) if k == "log"))

    def natural_coordinate(self, j, values):
        values = np.asarray(values, dtype=float)
        return np.exp(values) if self.kinds[j] == "log" else values


@dataclass(frozen=True)
class ElgmModel:
    """An extended latent Gaussian model.

    ``log_lik``, ``log_lik_grad`` and ``curvature`` act on additive
    predictors; ``curvature`` returns ``C_eta = -d^2 log_lik / d eta^2`` as a
    1-D array (diagonal), a sparse matrix, or a dense array.
    ``log_prior`` is the density of the natural-scale hyperparameters;
    the Jacobian of ``transform`` is added by :func:`log_joint`.
    """

    name: str
    design: sp.csr_matrix
    index_sets: IndexSets
    log_lik: Callable
    log_lik_grad: Callable
    curvature: Callable
    prior_precision: Callable
    log_prior: Callable = lambda nat: 0.0
    transform: Transform = Transform()
    theta_names: tuple = ()
    latent_names: tuple = ()
    theta_init: np.ndarray | None = None
    n_obs: int = 0
    vectorized: bool = True
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.design.shape[0] != self.index_sets.n_eta:
            raise ModelError("design rows must equal the number of additive predictors")
        self.index_sets.validate()
        if len(self.transform.kinds) != len(self.theta_names):
            raise ModelError("one transform per hyperparameter is required")
        if self.latent_names and len(self.latent_names) != self.m:
            raise ModelError("latent_names length must equal m")

    @property
    def m(self):
        return self.design.shape[1]

    @property
    def s(self):
        return len(self.theta_names)

    @property
    def n_eta(self):
        return self.index_sets.n_eta

    def initial_theta(self):
        if self.theta_init is None:
            return np.zeros(self.s)
        return np.asarray(self.theta_init, dtype=float).copy()

    def eta(self, w):
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            return self.design @ w
        return (self.design @ w.T).T

    def prior_terms(self, theta):
        """Return ``(Q, log|Q|)`` for the latent prior."""
        Q = self.prior_precision(theta)
        if self.m == 0:
            return sp.csr_matrix((0, 0)), 0.0
        if sp.issparse(Q):
            off = Q - sp.diags(Q.diagonal())
            if off.count_nonzero() == 0:
                d = Q.diagonal()
                if np.any(d <= 0):
                    raise ModelError("prior precision must be positive definite")
                return Q, float(np.sum(np.log(d)))
        return Q, cholesky(Q).log_det

    def curvature_pattern(self):
        """Structural pattern of ``C_eta`` implied by the index sets."""
        A = self.index_sets.incidence().astype(np.int64)
        return (A.T @ A).astype(bool).tocsr()

    def hessian_pattern(self):
        """Structural pattern of ``Q + Z^T C_eta Z``."""
        Zb = (self.design != 0).astype(np.int64)
        P = self.curvature_pattern().astype(np.int64)
        Qp = sp.csr_matrix(self.prior_precision(self.initial_theta()) != 0).astype(np.int64)
        H = Zb.T @ P @ Zb + Qp
        return H.astype(bool).tocsr()


@dataclass
class LatentState:
    """Latent vector with its cached additive predictors."""

    model: ElgmModel
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.eta = self.model.eta(self.w)

    def update(self, w):
        self.w = np.asarray(w, dtype=float)
        self.eta = self.model.eta(self.w)


def _quad_form(Q, w):
    if w.ndim == 1:
        return float(w @ (Q @ w))
    return np.einsum("bi,bi->b", w, (Q @ w.T).T)


def log_joint(model, w, theta):
    """``log pi(w, theta, Y)`` with theta on the unconstrained scale.

    Batched in ``w`` when ``model.vectorized``; returns ``-inf`` outside the
    likelihood domain.
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    Q, logdet_q = model.prior_terms(theta)
    eta = model.eta(w)
    ll = model.log_lik(eta, theta)
    prior_w = -0.5 * _quad_form(Q, w) + 0.5 * logdet_q - 0.5 * model.m * LOG_2PI if model.m else 0.0
    nat = model.transform.to_natural(theta)
    lp = model.log_prior(nat) + model.transform.log_jacobian(theta)
    return ll + prior_w + lp


def grad_w(model, w, theta):
    """Gradient of :func:`log_joint` in ``w``."""
    Q, _ = model.prior_terms(theta)
    eta = model.eta(w)
    return model.design.T @ model.log_lik_grad(eta, theta) - Q @ w


def _curvature_product(model, C):
    Z = model.design
    if np.ndim(C) == 1:
        return (Z.T @ Z.multiply(np.asarray(C)[:, None])).tocsr()
    if sp.issparse(C):
        return (Z.T @ C @ Z).tocsr()
    Zd = Z.toarray()
    return Zd.T @ C @ Zd


def hessian_w(model, w, theta, dense=None):
    """``Q(theta) + Z^T C_eta Z``, the negative Hessian of the log joint in ``w``.

    Sparse (CSR) when at most a quarter of the entries can be non-zero,
    dense otherwise; ``dense`` forces either storage.
    """
    Q, _ = model.prior_terms(theta)
    C = model.curvature(model.eta(w), theta)
    CW = _curvature_product(model, C)
    if sp.issparse(CW):
        H = (sp.csr_matrix(Q) + CW).tocsr()
        fill = H.nnz / max(1, model.m**2)
        if dense or (dense is None and fill > 0.25):
            return H.toarray()
        return H
    H = CW + (Q.toarray() if sp.issparse(Q) else Q)
    return sp.csr_matrix(H) if dense is False else H


def _onehot(codes, levels):
    n = len(codes)
    return sp.csr_matrix((np.ones(n), (np.arange(n), np.asarray(codes, dtype=np.int64))), shape=(n, levels))


def _exp_sd_log_prior(rate):
    def log_prior(nat):
        nat = np.asarray(nat, dtype=float)
        if np.any(nat <= 0):
            return -np.inf
        return float(np.sum(math.log(rate) - rate * nat))

    return log_prior


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def conjugate_gaussian(y):
    """``y_i ~ N(w, 1)``, ``w ~ N(0, 1)``; no hyperparameters."""
    y = np.asarray(y, dtype=float)
    n = y.size

    def log_lik(eta, theta):
        r = y - eta
        return -0.5 * np.sum(r * r, axis=-1) - 0.5 * n * LOG_2PI

    return ElgmModel(
        name="conjugate",
        design=sp.csr_matrix(np.ones((n, 1))),
        index_sets=IndexSets.singletons(n),
        log_lik=log_lik,
        log_lik_grad=lambda eta, theta: y - eta,
        curvature=lambda eta, theta: np.ones(n),
        prior_precision=lambda theta: sp.identity(1, format="csr"),
        latent_names=("mu",),
        n_obs=n,
    )


def gaussian_scale(y, design=None, prior_mean=0.0, prior_sd=1.0):
    """``y_i ~ N(eta_i, exp(theta))`` with ``theta ~ N(prior_mean, prior_sd**2)``.

    With ``design=None`` there is no latent field (``m = 0``). Otherwise
    ``eta = design @ w`` with ``w ~ N(0, I)``.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    Z = sp.csr_matrix((n, 0)) if design is None else sp.csr_matrix(design)
    m = Z.shape[1]

    def log_lik(eta, theta):
        r = y - eta
        return -0.5 * np.sum(r * r, axis=-1) * math.exp(-theta[0]) - 0.5 * n * (LOG_2PI + theta[0])

    def log_prior(nat):
        # lognormal density of the variance so that theta = log(variance) is normal
        v = nat[0]
        if v <= 0:
            return -np.inf
        t = math.log(v)
        return -0.5 * ((t - prior_mean) / prior_sd) ** 2 - math.log(prior_sd) - 0.5 * LOG_2PI - t

    return ElgmModel(
        name="gaussian-scale",
        design=Z,
        index_sets=IndexSets.singletons(n),
        log_lik=log_lik,
        log_lik_grad=lambda eta, theta: (y - eta) * math.exp(-theta[0]),
        curvature=lambda eta, theta: np.full(n, math.exp(-theta[0])),
        prior_precision=lambda theta: sp.identity(m, format="csr"),
        log_prior=log_prior,
        transform=Transform(("log",)),
        theta_names=("log_variance",),
        latent_names=tuple(f"w[{j}]" for j in range(m)),
        theta_init=np.array([math.log(max(np.var(y), 1e-8))]) if n > 1 else None,
        n_obs=n,
    )


def bernoulli_glmm(y, X, group1, group2, d1=None, d2=None, beta_variance=DEFAULT_BETA_VARIANCE, sd_rate=DEFAULT_SD_RATE):
    """Logistic regression with two sets of iid group effects.

    ``logit p_i = x_i' beta + u1[group1_i] + u2[group2_i]``,
    ``u1 ~ N(0, sigma1^2)``, ``u2 ~ N(0, sigma2^2)``, and
    ``theta = (log sigma1, log sigma2)`` with exponential priors on the
    standard deviations. Latent order is ``(u1, u2, beta)``.
    """
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != y.size:
        X = X.reshape(y.size, -1)
    g1 = np.asarray(group1, dtype=np.int64)
    g2 = np.asarray(group2, dtype=np.int64)
    n, p = X.shape
    d1 = int(g1.max()) + 1 if d1 is None else d1
    d2 = int(g2.max()) + 1 if d2 is None else d2
    if not np.all((y == 0) | (y == 1)):
        raise ModelError("bernoulli responses must be 0 or 1")
    Z = sp.hstack([_onehot(g1, d1), _onehot(g2, d2), sp.csr_matrix(X)]).tocsr()

    def log_lik(eta, theta):
        return np.sum(y * eta - np.logaddexp(0.0, eta), axis=-1)

    def curvature(eta, theta):
        p_ = expit(eta)
        return p_ * (1.0 - p_)

    def prior_precision(theta):
        return sp.diags(
            np.concatenate([
                np.full(d1, math.exp(-2.0 * theta[0])),
                np.full(d2, math.exp(-2.0 * theta[1])),
                np.full(p, 1.0 / beta_variance),
            ])
        ).tocsr()

    names = [f"u1[{j}]" for j in range(d1)] + [f"u2[{j}]" for j in range(d2)] + [f"beta[{j}]" for j in range(p)]
    return ElgmModel(
        name="bernoulli-glmm",
        design=Z,
        index_sets=IndexSets.singletons(n),
        log_lik=log_lik,
        log_lik_grad=lambda eta, theta: y - expit(eta),
        curvature=curvature,
        prior_precision=prior_precision,
        log_prior=_exp_sd_log_prior(sd_rate),
        transform=Transform(("log", "log")),
        theta_names=("log_sigma1", "log_sigma2"),
        latent_names=tuple(names),
        n_obs=n,
        info={"d1": d1, "d2": d2, "p": p},
    )


def cox_ph_partial(time, event, X, group=None, d=None, beta_variance=DEFAULT_BETA_VARIANCE, sd_rate=DEFAULT_SD_RATE):
    """Cox proportional hazards model with the partial likelihood.

    Observations are sorted by time (ties keep input order), so the risk set
    of sorted observation ``i`` is ``{i, ..., n-1}`` and ``J_i`` is the same
    set. ``eta_i = x_i' beta + u[group_i]``; the frailty ``u ~ N(0, sigma^2)``
    and ``theta = (log sigma,)`` are present only when ``group`` is given.
    There is no intercept: it cancels in every risk-set ratio.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(X, dtype=float).reshape(time.size, -1)
    n, p = X.shape
    order = np.argsort(time, kind="stable")
    ev = event[order].astype(float)
    Xs = X[order]
    blocks = []
    names = []
    has_frailty = group is not None
    if has_frailty:
        g = np.asarray(group, dtype=np.int64)[order]
        d = int(g.max()) + 1 if d is None else d
        blocks.append(_onehot(g, d))
        names += [f"u[{j}]" for j in range(d)]
    blocks.append(sp.csr_matrix(Xs))
    names += [f"beta[{j}]" for j in range(p)]
    Z = sp.hstack(blocks).tocsr()
    m = Z.shape[1]

    def _risk(eta):
        shift = np.max(eta, axis=-1, keepdims=True)
        e = np.exp(eta - shift)
        S = np.flip(np.cumsum(np.flip(e, axis=-1), axis=-1), axis=-1)
        return shift, e, S

    def log_lik(eta, theta):
        shift, e, S = _risk(eta)
        return np.sum(ev * (eta - shift - np.log(S)), axis=-1)

    def log_lik_grad(eta, theta):
        _, e, S = _risk(eta)
        a = np.cumsum(ev / S)
        return ev - e * a

    def curvature(eta, theta):
        _, e, S = _risk(eta)
        a = np.cumsum(ev / S)
        b = np.cumsum(ev / S**2)
        idx = np.arange(n)
        C = -np.outer(e, e) * b[np.minimum.outer(idx, idx)]
        C[idx, idx] += e * a
        return C

    def prior_precision(theta):
        diag = [np.full(p, 1.0 / beta_variance)]
        if has_frailty:
            diag.insert(0, np.full(d, math.exp(-2.0 * theta[0])))
        return sp.diags(np.concatenate(diag)).tocsr()

    return ElgmModel(
        name="cox",
        design=Z,
        index_sets=IndexSets.from_lists([np.arange(i, n) for i in range(n)], n),
        log_lik=log_lik,
        log_lik_grad=log_lik_grad,
        curvature=curvature,
        prior_precision=prior_precision,
        log_prior=_exp_sd_log_prior(sd_rate) if has_frailty else (lambda nat: 0.0),
        transform=Transform(("log",) if has_frailty else ()),
        theta_names=("log_sigma",) if has_frailty else (),
        latent_names=tuple(names),
        n_obs=n,
        info={"order": order, "p": p, "d": d if has_frailty else 0},
    )


def poisson_aggregate(y, cells, populations, X_cells=None, n_cells=None, beta_variance=DEFAULT_BETA_VARIANCE, sd_rate=DEFAULT_SD_RATE):
    """Aggregated Poisson counts over shared cells.

    ``y_i ~ Poisson(sum_{t in J_i} P_it exp(eta_t))`` with
    ``eta_t = x_t' beta + u_t`` and ``u ~ N(0, sigma^2 I)``;
    ``theta = (log sigma,)``. ``cells[i]`` lists ``J_i`` and
    ``populations[i]`` the matching ``P_it``. Latent order is ``(u, beta)``.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    cells = [np.asarray(c, dtype=np.int64) for c in cells]
    populations = [np.asarray(pp, dtype=float) for pp in populations]
    if len(cells) != n or len(populations) != n:
        raise ModelError("one cell list and population list per region is required")
    if any(c.size == 0 or c.size != pp.size for c, pp in zip(cells, populations)):
        raise ModelError("each region needs a non-empty cell list with one population per cell")
    top = int(max(c.max() for c in cells)) if n else -1
    T = top + 1 if n_cells is None else int(n_cells)
    if top >= T or any(c.min() < 0 for c in cells):
        raise ModelError(f"cell index out of range 0..{T - 1}")
    rows = np.repeat(np.arange(n), [len(c) for c in cells])
    A = sp.csr_matrix((np.concatenate(populations), (rows, np.concatenate(cells))), shape=(n, T))
    At = A.T.tocsr()
    Xc = np.zeros((T, 0)) if X_cells is None else np.asarray(X_cells, dtype=float).reshape(T, -1)
    p = Xc.shape[1]
    Z = sp.hstack([sp.identity(T, format="csr"), sp.csr_matrix(Xc)]).tocsr()
    const = float(np.sum(gammaln(y + 1.0)))

    def _rates(eta):
        return (A @ np.exp(eta).T).T

    def log_lik(eta, theta):
        r = _rates(eta)
        bad = r <= 0
        if np.any(bad):
            warnings.warn("non-positive Poisson rate", LikelihoodDomainWarning, stacklevel=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(bad, -np.inf, y * np.log(np.where(bad, 1.0, r)) - r)
        return np.sum(terms, axis=-1) - const

    def log_lik_grad(eta, theta):
        e = np.exp(eta)
        r = A @ e
        return e * (At @ (y / r - 1.0))

    def curvature(eta, theta):
        e = np.exp(eta)
        r = A @ e
        AE = A @ sp.diags(e)
        C = AE.T @ sp.diags(y / r**2) @ AE + sp.diags(e * (At @ (1.0 - y / r)))
        return C.tocsr()

    def prior_precision(theta):
        return sp.diags(np.concatenate([np.full(T, math.exp(-2.0 * theta[0])), np.full(p, 1.0 / beta_variance)])).tocsr()

    return ElgmModel(
        name="poisson-aggregate",
        design=Z,
        index_sets=IndexSets.from_lists(cells, T),
        log_lik=log_lik,
        log_lik_grad=log_lik_grad,
        curvature=curvature,
        prior_precision=prior_precision,
        log_prior=_exp_sd_log_prior(sd_rate),
        transform=Transform(("log",)),
        theta_names=("log_sigma",),
        latent_names=tuple([f"u[{t}]" for t in range(T)] + [f"beta[{j}]" for j in range(p)]),
        n_obs=n,
        info={"aggregation": A, "p": p, "n_cells": T},
    )
