"""Brute-force oracle posteriors and Kolmogorov-Smirnov comparisons.

Joint coordinates are ordered ``(w_0, ..., w_{m-1}, theta_0, ..., theta_{s-1})``
with theta on the unconstrained scale.
"""

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, DimensionCapError, EvaluationError
from .inference import sample_posterior, sample_theta
from .models import log_joint

MAX_JOINT_DIM = 4
MAX_ORACLE_POINTS = 10**7
COVERAGE_SDS = 8.0
_CHUNK = 2**16


class CoverageWarning(RuntimeWarning):
    """Oracle grid spans fewer than eight posterior standard deviations."""


def _trapezoid_weights(x):
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return np.ones(1)
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _cumtrapz(x, f):
    """Cumulative trapezoid integral with the Euler-Maclaurin endpoint term.

    The ``-h**2/12 * (f'(x) - f'(x_0))`` correction lifts the error from
    O(h**2) to O(h**4) on uniform grids; the result is kept nondecreasing.
    """
    c = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
    if x.size < 3:
        return c
    h = (x[-1] - x[0]) / (x.size - 1)
    df = np.gradient(f, h, edge_order=2)
    c = c - h * h / 12.0 * (df - df[0])
    return np.maximum.accumulate(np.maximum(c, 0.0))


@dataclass(frozen=True)
class OracleDensity:
    """Normalized posterior on a rectangular grid over the coordinates ``dims``.

    ``log_normalizer`` is the log trapezoid evidence over the full joint
    grid; ``log_density`` integrates to one by the trapezoid rule over
    ``axes``.
    """

    dims: tuple
    names: tuple
    axes: tuple
    log_density: np.ndarray
    log_normalizer: float
    coverage_ok: bool

    def marginal(self, i):
        """``(x, density)`` of the ``i``-th retained coordinate."""
        axes = tuple(a for a in range(len(self.axes)) if a != i)
        dens = np.exp(self.log_density)
        for a in sorted(axes, reverse=True):
            dens = np.tensordot(dens, _trapezoid_weights(self.axes[a]), axes=([a], [0]))
        return self.axes[i], dens

    def cdf_values(self, i):
        """Cumulative trapezoid integral of the marginal at the grid points."""
        x, d = self.marginal(i)
        c = _cumtrapz(x, d)
        return x, c / c[-1]

    def cdf(self, i):
        """Monotone piecewise-linear CDF of the ``i``-th retained coordinate."""
        x, c = self.cdf_values(i)
        return lambda t: np.interp(t, x, c, left=0.0, right=1.0)

    def moments(self, i):
        x, d = self.marginal(i)
        tw = _trapezoid_weights(x)
        mean = float(np.sum(tw * d * x))
        var = float(np.sum(tw * d * (x - mean) ** 2))
        return mean, var


def grid_around(center, sd, n, width=6.0):
    """Axis ``(lo, hi, n)`` spanning ``center +- width * sd``."""
    return (float(center - width * sd), float(center + width * sd), int(n))


def brute_force_posterior(model, dims, grid_spec):
    """Tensor-grid trapezoid posterior of ``model`` marginalized onto ``dims``.

    Parameters
    ----------
    dims : sequence of int
        Joint coordinates (latent first, then hyperparameters) to keep.
    grid_spec : sequence of (lo, hi, n)
        One uniform axis per joint coordinate.

    Raises
    ------
    DimensionCapError
        If ``m + s > 4`` or the grid exceeds ``10**7`` points.
    EvaluationError
        If more than half of the grid has a non-finite log joint.
    """
    m, s = model.m, model.s
    d = m + s
    if d > MAX_JOINT_DIM:
        raise DimensionCapError(f"brute-force oracle supports m + s <= {MAX_JOINT_DIM}, got {d}")
    if len(grid_spec) != d:
        raise DataError(f"grid_spec needs {d} axes, got {len(grid_spec)}")
    dims = tuple(int(i) for i in dims)
    if not dims or any(not 0 <= i < d for i in dims) or len(set(dims)) != len(dims):
        raise DataError(f"dims must be distinct coordinates in [0, {d})")
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in grid_spec]
    total = int(np.prod([a.size for a in axes]))
    if total > MAX_ORACLE_POINTS:
        raise DimensionCapError(f"oracle grid has {total} points (cap {MAX_ORACLE_POINTS})")

    w_axes, t_axes = axes[:m], axes[m:]
    w_shape = tuple(a.size for a in w_axes)
    W = np.stack([g.ravel() for g in np.meshgrid(*w_axes, indexing="ij")], axis=1) if m else np.zeros((1, 0))
    values = np.empty((int(np.prod([a.size for a in t_axes])) if s else 1, W.shape[0]))

    for row, theta in enumerate(itertools.product(*t_axes)):
        theta = np.array(theta, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if not model.vectorized:
                values[row] = [log_joint(model, w, theta) for w in W]
            elif m == 0:
                values[row] = log_joint(model, W[0], theta)
            else:
                for lo in range(0, W.shape[0], _CHUNK):
                    values[row, lo:lo + _CHUNK] = log_joint(model, W[lo:lo + _CHUNK], theta)

    values = values.T.reshape(w_shape + tuple(a.size for a in t_axes)) if s else values.reshape(w_shape)
    bad = ~np.isfinite(values)
    if bad.mean() > 0.5:
        raise EvaluationError(f"log joint is non-finite on {bad.mean():.1%} of the oracle grid", point=None)
    values = np.where(bad, -np.inf, values)

    # trapezoid over every dropped axis, relative to the peak
    peak = float(np.max(values))
    dens = np.exp(values - peak)
    for a in reversed(range(d)):
        if a not in dims:
            dens = np.tensordot(dens, _trapezoid_weights(axes[a]), axes=([a], [0]))
    kept_axes = tuple(axes[i] for i in sorted(dims))
    mass = dens
    for a in reversed(range(len(kept_axes))):
        mass = np.tensordot(mass, _trapezoid_weights(kept_axes[a]), axes=([a], [0]))
    mass = float(mass)
    log_norm = peak + np.log(mass)
    with np.errstate(divide="ignore"):
        log_density = np.log(dens) - np.log(mass)
    # reorder kept axes to the order requested
    order = [sorted(dims).index(i) for i in dims]
    log_density = np.transpose(log_density, order)

    names = tuple(model.latent_names or [f"w[{j}]" for j in range(m)]) + tuple(model.theta_names)
    oracle = OracleDensity(dims, tuple(names[i] for i in dims), tuple(axes[i] for i in dims), log_density, float(log_norm), True)
    ok = _coverage(oracle)
    if not ok:
        warnings.warn("oracle grid covers fewer than 8 posterior sd in some dimension", CoverageWarning, stacklevel=2)
    return OracleDensity(oracle.dims, oracle.names, oracle.axes, oracle.log_density, oracle.log_normalizer, ok)


def _coverage(oracle):
    for i, x in enumerate(oracle.axes):
        if x.size < 2:
            continue
        mean, var = oracle.moments(i)
        sd = np.sqrt(max(var, 0.0))
        if x[0] > mean - 0.5 * COVERAGE_SDS * sd or x[-1] < mean + 0.5 * COVERAGE_SDS * sd:
            return False
    return True


def ks_statistic(samples, reference):
    """Kolmogorov-Smirnov distance.

    ``reference`` is either a second sample (two-sample statistic) or a
    callable CDF (one-sample statistic).
    """
    a = np.sort(np.asarray(samples, dtype=float).ravel())
    if a.size == 0:
        raise ValueError("empty sample")
    if callable(reference):
        n = a.size
        F = np.asarray(reference(a), dtype=float)
        i = np.arange(1, n + 1)
        return float(max(np.max(i / n - F), np.max(F - (i - 1) / n), 0.0))
    b = np.sort(np.asarray(reference, dtype=float).ravel())
    if b.size == 0:
        raise ValueError("empty reference sample")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def compare_fit_to_oracle(fit, oracle, B, seed):
    """One-sample KS of fit draws against each oracle marginal.

    Latent coordinates are drawn with :func:`~elgm.inference.sample_posterior`
    and hyperparameters with :func:`~elgm.inference.sample_theta`. Returns a
    dict keyed by coordinate name.
    """
    m = fit.m
    out = {}
    draws = None
    for i, (coord, name) in enumerate(zip(oracle.dims, oracle.names)):
        if coord < m:
            if draws is None:
                draws = sample_posterior(fit, B, seed).draws
            x = draws[:, coord]
        else:
            x = sample_theta(fit, B, seed, coord - m)
        out[name] = ks_statistic(x, oracle.cdf(i))
    return out


def log_sum_trapezoid(log_f, x):
    """``log`` of the trapezoid integral of ``exp(log_f)`` over ``x``."""
    return float(logsumexp(np.asarray(log_f) + np.log(_trapezoid_weights(x))))
