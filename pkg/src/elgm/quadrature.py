"""Gauss-Hermite rules and their adaptation to a mode and curvature.

Rules use the probabilists' (standard normal kernel) Hermite convention with
weights divided by the normal density at each node, so that

    sum_j f(z_j) * w_j  ~=  integral f(z) dz

for integrands that behave like a polynomial times exp(-z**2 / 2).
"""

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import logsumexp

from .errors import (
    DegeneratePosteriorError,
    FactorizationError,
    GridCapacityError,
    InvalidOrderError,
)

MAX_ORDER = 199
MAX_GRID_POINTS = 10**6
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class UnivariateRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class ProductRule:
    dim: int
    order: int
    points: np.ndarray  # (k**s, s)
    weights: np.ndarray  # (k**s,)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class AdaptedGrid:
    """Quadrature nodes placed at ``cholesky @ z + center``.

    ``raw_weights`` are the unadapted product weights; the adapted
    integration weights are ``exp(log_det_cholesky) * raw_weights``.
    """

    center: np.ndarray
    cholesky: np.ndarray
    z: np.ndarray
    nodes: np.ndarray
    raw_weights: np.ndarray
    log_values: np.ndarray
    lam: np.ndarray

    @property
    def log_det_cholesky(self):
        return float(np.sum(np.log(np.diag(self.cholesky)))) if self.cholesky.size else 0.0

    @property
    def mode_index(self):
        """Index of the node sitting exactly at the center, or None for even k."""
        hits = np.flatnonzero(np.all(self.z == 0.0, axis=1))
        return int(hits[0]) if hits.size else None

    def __len__(self):
        return len(self.raw_weights)


def _check_order(k):
    if isinstance(k, bool) or int(k) != k or not 1 <= k <= MAX_ORDER:
        raise InvalidOrderError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {k!r}")
    return int(k)


def gauss_hermite_rule(k):
    """Return the ``k``-point Gauss-Hermite rule by Golub-Welsch.

    Nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix of the
    probabilists' Hermite recurrence (zero diagonal, off-diagonal sqrt(i)).
    The squared first eigenvector components give the weights against the
    standard normal density; those are divided by phi(z_j).
    """
    k = _check_order(k)
    if k == 1:
        return UnivariateRule(1, np.zeros(1), np.array([math.sqrt(2.0 * math.pi)]))
    off = np.sqrt(np.arange(1, k, dtype=float))
    nodes = eigh_tridiagonal(np.zeros(k), off, eigvals_only=True)
    # The eigenvector for node z is (p_0(z), ..., p_{k-1}(z)) with p_i the
    # orthonormal Hermite polynomials; building it from the recurrence keeps
    # full relative precision in the tiny first components at large |z|.
    p_prev = np.zeros(k)
    p_cur = np.ones(k)
    sq_norm = np.ones(k)
    for i in range(1, k):
        p_next = (nodes * p_cur - off[i - 2] * p_prev if i > 1 else nodes * p_cur) / off[i - 1]
        p_prev, p_cur = p_cur, p_next
        sq_norm += p_cur**2
    log_w = -np.log(sq_norm)

    # symmetrize to remove asymmetric rounding
    nodes = 0.5 * (nodes - nodes[::-1])
    log_w = 0.5 * (log_w + log_w[::-1])
    if k % 2 == 1:
        nodes[k // 2] = 0.0
    log_w = log_w - logsumexp(log_w)
    weights = np.exp(log_w + LOG_SQRT_2PI + 0.5 * nodes**2)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return UnivariateRule(k, nodes, weights)


def product_rule(s, k):
    """Tensor-product extension of the univariate rule to ``s`` dimensions.

    Points are enumerated in lexicographic order of their node indices, the
    last coordinate varying fastest. ``s = 0`` yields the single empty point
    with weight one.
    """
    if isinstance(s, bool) or int(s) != s or s < 0:
        raise ValueError(f"dimension must be a non-negative integer, got {s!r}")
    s = int(s)
    k = _check_order(k)
    if k % 2 == 0:
        warnings.warn(f"even order k={k} does not place a node at the mode", stacklevel=2)
    if s > 0 and k**s > MAX_GRID_POINTS:
        raise GridCapacityError(
            f"product grid has {k}**{s} = {k**s} points (cap {MAX_GRID_POINTS}); "
            "use a smaller k (sparse rules are not supported)"
        )
    if s == 0:
        return ProductRule(0, k, np.zeros((1, 0)), np.ones(1))
    base = gauss_hermite_rule(k)
    idx = np.array(list(itertools.product(range(k), repeat=s)), dtype=int)
    points = base.nodes[idx]
    weights = np.prod(base.weights[idx], axis=1)
    return ProductRule(s, k, points, weights)


def adapt(rule, center, cholesky):
    """Move a product rule to ``cholesky @ z + center``.

    Returns ``(points, weights)`` with weights multiplied by ``|cholesky|``,
    the product of its diagonal.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    L = np.atleast_2d(np.asarray(cholesky, dtype=float)) if rule.dim else np.zeros((0, 0))
    if center.shape != (rule.dim,) or L.shape != (rule.dim, rule.dim):
        raise ValueError("center/cholesky shapes do not match the rule dimension")
    diag = np.diag(L)
    if np.any(~(diag > 0)):
        raise FactorizationError("cholesky factor must have a strictly positive diagonal")
    points = rule.points @ L.T + center
    return points, rule.weights * float(np.prod(diag))


def normalize_lambda(log_values, raw_weights, log_det_cholesky=0.0):
    """Normalized mixture weights proportional to ``exp(log_values) * raw_weights * |L|``.

    The ``|L|`` factor cancels after normalization but is accepted for
    symmetry with the adapted-sum formula.
    """
    log_values = np.asarray(log_values, dtype=float)
    raw_weights = np.asarray(raw_weights, dtype=float)
    finite = np.isfinite(log_values) & (raw_weights > 0)
    if not np.any(finite):
        raise DegeneratePosteriorError("all quadrature nodes have zero posterior mass")
    # centre before adding log weights so a common shift cancels exactly
    terms = (log_values - np.max(log_values[finite])) + np.log(raw_weights) + log_det_cholesky
    lam = np.zeros_like(terms)
    lam[finite] = np.exp(terms[finite] - logsumexp(terms[finite]))
    return lam
