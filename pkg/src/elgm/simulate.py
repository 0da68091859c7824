"""Synthetic datasets with known truth, and builders from tables to models.

All generators draw from ``numpy.random.Generator(numpy.random.Philox(seed))``
so a seed names the same stream on every platform.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import models
from .data import ColumnTable
from .errors import ConfigError, DataError


def rng_for(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class SimTruth:
    generator: str
    seed: int
    params: dict
    table: ColumnTable
    extras: dict = field(default_factory=dict)


def _covariates(rng, n, p):
    """Intercept plus ``p - 1`` standard normal columns."""
    X = np.ones((n, p))
    if p > 1:
        X[:, 1:] = rng.standard_normal((n, p - 1))
    return X


def simulate_conjugate(seed, n, ybar=0.0):
    """``n`` values with sample mean ``ybar`` and centered standard normal spread."""
    rng = rng_for(seed)
    e = rng.standard_normal(n)
    y = ybar + (e - e.mean()) if n else e
    if n:
        y = y - (y.sum() - n * ybar) / n
    return SimTruth("conjugate", seed, {"n": n, "ybar": ybar}, ColumnTable({"y": y}, {"y": "real"}))


def simulate_gaussian_scale(seed, n, theta=0.0):
    """``y_i ~ N(0, exp(theta))``."""
    rng = rng_for(seed)
    y = rng.standard_normal(n) * np.exp(0.5 * theta)
    return SimTruth("gaussian-scale", seed, {"n": n, "theta": theta}, ColumnTable({"y": y}, {"y": "real"}))


def simulate_bernoulli_glmm(seed, n, d1, d2, beta, sigma1, sigma2):
    """Bernoulli responses with nested group effects.

    Second-level groups are drawn uniformly from ``d2`` labels and nest in
    first-level group ``group2 mod d1``. Columns: ``y``, ``x0..x{p-1}``
    (``x0`` is the intercept), ``g1``, ``g2``.
    """
    if n < 1 or d1 < 1 or d2 < 1:
        raise ValueError("n, d1 and d2 must be positive")
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    rng = rng_for(seed)
    p = beta.size
    X = _covariates(rng, n, p)
    g2 = rng.integers(0, d2, size=n)
    g1 = g2 % d1
    u1 = sigma1 * rng.standard_normal(d1)
    u2 = sigma2 * rng.standard_normal(d2)
    eta = X @ beta + u1[g1] + u2[g2]
    y = (rng.random(n) < expit(eta)).astype(np.int64)
    cols = {"y": y}
    kinds = {"y": "integer"}
    for j in range(p):
        cols[f"x{j}"] = X[:, j]
        kinds[f"x{j}"] = "real"
    cols["g1"], cols["g2"] = g1.astype(np.int64), g2.astype(np.int64)
    kinds["g1"] = kinds["g2"] = "integer"
    params = {"n": n, "d1": d1, "d2": d2, "beta": beta.tolist(), "sigma1": sigma1, "sigma2": sigma2}
    return SimTruth("bernoulli-glmm", seed, params, ColumnTable(cols, kinds), {"u1": u1, "u2": u2})


def simulate_cox(seed, n, beta, frailty_sd=0.0, d=1, censor_quantile=0.9):
    """Exponential survival times with hazard ``exp(x' beta + u[group])``.

    Covariates are standard normal (no intercept). Follow-up ends at the
    ``censor_quantile`` sample quantile of the event times; ``1.0`` disables
    censoring. Columns: ``time``, ``event``, ``x0..``, ``group``, ``frailty``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    rng = rng_for(seed)
    p = beta.size
    X = rng.standard_normal((n, p))
    group = rng.integers(0, d, size=n)
    u = frailty_sd * rng.standard_normal(d)
    eta = X @ beta + u[group]
    t = rng.exponential(1.0, size=n) * np.exp(-eta)
    cut = np.quantile(t, censor_quantile) if censor_quantile < 1.0 else np.inf
    event = (t <= cut).astype(np.int64)
    time = np.minimum(t, cut)
    cols = {"time": time, "event": event}
    kinds = {"time": "real", "event": "integer"}
    for j in range(p):
        cols[f"x{j}"] = X[:, j]
        kinds[f"x{j}"] = "real"
    cols["group"] = group.astype(np.int64)
    cols["frailty"] = u[group]
    kinds["group"], kinds["frailty"] = "integer", "real"
    params = {"n": n, "beta": beta.tolist(), "frailty_sd": frailty_sd, "d": d, "censor_quantile": censor_quantile}
    return SimTruth("cox", seed, params, ColumnTable(cols, kinds), {"u": u})


def simulate_poisson_aggregate(seed, regions, cells_per_region, beta, sigma, n_cells=None, population=(0.5, 1.5)):
    """Region counts aggregating Poisson rates over cells.

    Without ``n_cells`` every region owns ``cells_per_region`` private
    cells. With ``n_cells`` the cells are shared: region ``i`` covers
    cells ``(i + j) mod n_cells`` for ``j < cells_per_region``. Cell rates
    are ``P_it exp(x_t' beta + u_t)`` with ``P_it`` uniform on
    ``population``; ``beta`` may be empty.

    The long-format table has one row per (region, cell) pair with columns
    ``region``, ``cell``, ``population``, ``count`` (repeated within a
    region) and cell covariates ``x0..``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float)) if np.size(beta) else np.zeros(0)
    rng = rng_for(seed)
    c = int(cells_per_region)
    if n_cells is None:
        T = regions * c
        cells = np.arange(T).reshape(regions, c)
    else:
        T = int(n_cells)
        if c > T:
            raise ValueError("cells_per_region cannot exceed n_cells")
        cells = (np.arange(regions)[:, None] + np.arange(c)[None, :]) % T
    p = beta.size
    X = _covariates(rng, T, p) if p else np.zeros((T, 0))
    u = sigma * rng.standard_normal(T)
    lam = np.exp(X @ beta + u)
    P = rng.uniform(population[0], population[1], size=(regions, c))
    rate = np.sum(P * lam[cells], axis=1)
    y = rng.poisson(rate).astype(np.int64)

    cols = {
        "region": np.repeat(np.arange(regions), c).astype(np.int64),
        "cell": cells.ravel().astype(np.int64),
        "population": P.ravel(),
        "count": np.repeat(y, c),
    }
    kinds = {"region": "integer", "cell": "integer", "population": "real", "count": "integer"}
    for j in range(p):
        cols[f"x{j}"] = X[cells.ravel(), j]
        kinds[f"x{j}"] = "real"
    params = {"regions": regions, "cells_per_region": c, "n_cells": T, "beta": beta.tolist(), "sigma": sigma}
    return SimTruth("poisson-aggregate", seed, params, ColumnTable(cols, kinds), {"u": u, "y": y, "rate": rate})


# ---------------------------------------------------------------------------
# tables -> models
# ---------------------------------------------------------------------------


def _x_columns(table):
    return sorted((c for c in table.names if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))


def _codes(table, name):
    col = np.asarray(table[name])
    if table.kinds.get(name) == "category":
        return col, len(table.levels[name])
    col = col.astype(np.int64)
    if col.size and col.min() < 0:
        raise DataError(f"column {name} must hold non-negative group codes")
    return col, int(col.max()) + 1 if col.size else 0


def build_model(name, table, options=None):
    """Construct a built-in model from a :class:`ColumnTable`."""
    opts = dict(options or {})
    if name == "conjugate":
        return models.conjugate_gaussian(table["y"])
    if name == "gaussian-scale":
        return models.gaussian_scale(table["y"], prior_mean=opts.get("prior_mean", 0.0), prior_sd=opts.get("prior_sd", 1.0))
    xs = _x_columns(table)
    X = np.column_stack([table[c] for c in xs]) if xs else np.zeros((table.n_rows, 0))
    kw = {k: opts[k] for k in ("beta_variance", "sd_rate") if k in opts}
    if name == "bernoulli-glmm":
        g1, d1 = _codes(table, "g1")
        g2, d2 = _codes(table, "g2")
        return models.bernoulli_glmm(table["y"], X, g1, g2, d1, d2, **kw)
    if name == "cox":
        group = d = None
        if opts.get("frailty", False):
            group, d = _codes(table, "group")
        return models.cox_ph_partial(table["time"], table["event"].astype(bool), X, group, d, **kw)
    if name == "poisson-aggregate":
        region = np.asarray(table["region"], dtype=np.int64)
        cell = np.asarray(table["cell"], dtype=np.int64)
        R = int(region.max()) + 1 if region.size else 0
        T = int(cell.max()) + 1 if cell.size else 0
        rows = [np.flatnonzero(region == i) for i in range(R)]
        if any(r.size == 0 for r in rows):
            raise DataError("region codes must be contiguous 0..R-1")
        counts = np.asarray(table["count"])
        y = np.array([counts[r[0]] for r in rows])
        if any(np.any(counts[r] != counts[r[0]]) for r in rows):
            raise DataError("count must be constant within a region")
        Xc = None
        if xs:
            Xc = np.zeros((T, len(xs)))
            Xc[cell] = X
        return models.poisson_aggregate(
            y, [cell[r] for r in rows], [np.asarray(table["population"])[r] for r in rows], Xc, T, **kw
        )
    raise ConfigError(f"unknown model {name!r}", keys=["model"])


SCHEMAS = {
    "conjugate": {"y": "real"},
    "gaussian-scale": {"y": "real"},
    "bernoulli-glmm": {"y": "integer", "g1": "category", "g2": "category"},
    "cox": {"time": "real", "event": "integer"},
    "poisson-aggregate": {"region": "integer", "cell": "integer", "population": "real", "count": "integer"},
}


def schema_for(name, header):
    """Schema for ``name``: its fixed columns plus any ``x<j>`` covariates in ``header``."""
    if name not in SCHEMAS:
        raise ConfigError(f"unknown model {name!r}", keys=["model"])
    schema = dict(SCHEMAS[name])
    for h in header:
        if h.startswith("x") and h[1:].isdigit():
            schema[h] = "real"
    if name == "cox" and "group" in header:
        schema["group"] = "category"
    return schema


def simulate(name, seed, options):
    """Dispatch to the simulator for model ``name`` with keyword ``options``."""
    o = dict(options)
    if name == "conjugate":
        return simulate_conjugate(seed, int(o.get("n", 4)), float(o.get("ybar", 0.0)))
    if name == "gaussian-scale":
        return simulate_gaussian_scale(seed, int(o.get("n", 200)), float(o.get("theta", 0.0)))
    if name == "bernoulli-glmm":
        return simulate_bernoulli_glmm(
            seed, int(o.get("n", 1000)), int(o.get("d1", 10)), int(o.get("d2", 30)),
            _floats(o.get("beta", [-0.5, 0.5])), float(o.get("sigma1", 0.5)), float(o.get("sigma2", 0.5)),
        )
    if name == "cox":
        return simulate_cox(
            seed, int(o.get("n", 100)), _floats(o.get("beta", [0.5, -0.5])), float(o.get("frailty_sd", 0.0)),
            int(o.get("d", 1)), float(o.get("censor_quantile", 0.9)),
        )
    if name == "poisson-aggregate":
        nc = o.get("n_cells")
        return simulate_poisson_aggregate(
            seed, int(o.get("regions", 30)), int(o.get("cells_per_region", 2)), _floats(o.get("beta", [])),
            float(o.get("sigma", 0.5)), None if nc is None else int(nc),
            (float(o.get("population_low", 0.5)), float(o.get("population_high", 1.5))),
        )
    raise ConfigError(f"unknown model {name!r}", keys=["model"])


def _floats(v):
    if isinstance(v, str):
        return [float(x) for x in v.replace(";", " ").split()] if v.strip() else []
    return [float(x) for x in np.atleast_1d(v)]
