"""Column tables, CSV ingestion and result serialization.

Fit metadata and manifests are TOML documents carrying a ``format_version``
key; tables and samples are CSV with numbers written to 17 significant
digits so that doubles round-trip exactly.
"""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import DataError

FORMAT_VERSION = 1
KINDS = ("real", "integer", "category")


def fmt(x):
    """Format a number with 17 significant digits."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class ColumnTable:
    columns: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")
        for name, kind in self.kinds.items():
            if kind not in KINDS:
                raise DataError(f"unknown column kind {kind!r} for {name!r}")

    @property
    def n_rows(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __getitem__(self, name):
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"missing column {name!r}") from None

    def __contains__(self, name):
        return name in self.columns

    @property
    def names(self):
        return list(self.columns)

    def labels(self, name):
        """Category column decoded back to its level strings."""
        levels = self.levels[name]
        return [levels[c] for c in self.columns[name]]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.names)
            cols = []
            for name in self.names:
                if self.kinds.get(name) == "category":
                    cols.append(self.labels(name))
                else:
                    cols.append([fmt(v) for v in self.columns[name]])
            writer.writerows(zip(*cols))


def read_csv(path, schema):
    """Read a header-first, comma-separated UTF-8 file into a :class:`ColumnTable`.

    ``schema`` maps column name to ``"real"``, ``"integer"`` or
    ``"category"``. Category levels are coded 0..L-1 in order of first
    appearance. Row numbers in error messages count data rows from 1.
    """
    for name, kind in schema.items():
        if kind not in KINDS:
            raise DataError(f"unknown column kind {kind!r} for {name!r}")
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return ColumnTable(
            {n: np.zeros(0, dtype=np.int64 if k != "real" else float) for n, k in schema.items()},
            dict(schema),
            {n: [] for n, k in schema.items() if k == "category"},
        )
    header = [h.strip() for h in rows[0]]
    missing = [n for n in schema if n not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    pos = {n: header.index(n) for n in schema}
    raw = {n: [] for n in schema}
    for r, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, found {len(row)}")
        for n in schema:
            raw[n].append(row[pos[n]].strip())

    columns, levels = {}, {}
    for n, kind in schema.items():
        cells = raw[n]
        if kind == "category":
            lv = {}
            codes = [lv.setdefault(c, len(lv)) for c in cells]
            columns[n] = np.array(codes, dtype=np.int64)
            levels[n] = list(lv)
            continue
        out = np.empty(len(cells), dtype=float if kind == "real" else np.int64)
        for r, c in enumerate(cells, start=1):
            try:
                v = float(c)
                if kind == "integer":
                    if not v.is_integer():
                        raise ValueError
                    v = int(v)
            except ValueError:
                raise DataError(f"row {r}, column {n}: cannot parse {c!r} as {kind}") from None
            out[r - 1] = v
        columns[n] = out
    return ColumnTable(columns, dict(schema), levels)


def _toml_safe(obj):
    """Convert numpy containers and scalars into TOML-serializable values."""
    if isinstance(obj, dict):
        return {str(k): _toml_safe(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_toml_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _toml_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_toml(doc, path):
    doc = {"format_version": FORMAT_VERSION, **_toml_safe(doc)}
    Path(path).write_text(tomli_w.dumps(doc), encoding="utf-8")


def read_toml(path):
    return tomli.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("name", "mean", "sd", "q2.5", "q50", "q97.5")


def write_summaries(rows, path):
    """Write summary rows as CSV with columns name,mean,sd,q2.5,q50,q97.5."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            q = list(row["quantiles"])
            writer.writerow([row["name"], fmt(row["mean"]), fmt(row["sd"])] + [fmt(v) for v in q])


def read_summaries(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            {"name": r["name"], "mean": float(r["mean"]), "sd": float(r["sd"]),
             "quantiles": np.array([float(r["q2.5"]), float(r["q50"]), float(r["q97.5"])])}
            for r in reader
        ]


def write_samples(batch, path, names=None):
    """Write a :class:`~elgm.inference.SampleBatch`: one column per latent coordinate plus ``node``."""
    m = batch.draws.shape[1]
    names = list(names) if names is not None else [f"w[{j}]" for j in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ["node"])
        for row, node in zip(batch.draws, batch.node_choice):
            writer.writerow([fmt(v) for v in row] + [str(int(node))])


def read_samples(path):
    """Return ``(names, draws, node_choice)`` from a samples CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    arr = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(header) - 1)
    nodes = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return header[:-1], arr, nodes


def write_density(theta, density, cdf, path, name="theta"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([name, "density", "cdf"])
        for t, d, c in zip(theta, density, cdf):
            writer.writerow([fmt(t), fmt(d), fmt(c)])


def fit_metadata(fit, extra=None):
    """Key-value description of a fit (no per-node arrays)."""
    doc = {
        "fit": {
            "k": fit.config.k,
            "s": fit.s,
            "m": fit.m,
            "log_evidence": fit.log_evidence,
            "converged": fit.converged,
            "outer_iterations": fit.outer_iterations,
            "outer_grad_norm": fit.outer_grad_norm,
            "hessian_jitter": fit.hessian_jitter,
            "theta_names": list(fit.theta_names),
            "transforms": list(fit.transform_kinds),
            "theta_hat": fit.theta_hat,
            "hessian": [list(r) for r in fit.hessian_out],
            "cholesky": [list(r) for r in fit.cholesky_out],
        },
        "tolerances": {"inner": fit.config.tol_inner, "outer": fit.config.tol_outer, "max_iter": fit.config.max_iter},
        "timings": dict(fit.timings),
    }
    if extra:
        doc.update(extra)
    return doc


def save_fit(fit, directory, extra=None):
    """Write ``fit.toml`` (metadata) and ``fit_nodes.npz`` (per-node solutions)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_toml(fit_metadata(fit, extra), directory / "fit.toml")
    np.savez(
        directory / "fit_nodes.npz",
        theta_hat=fit.theta_hat, hessian_out=fit.hessian_out, cholesky_out=fit.cholesky_out,
        z=fit.grid.z, nodes=fit.grid.nodes, raw_weights=fit.grid.raw_weights,
        log_values=fit.grid.log_values, lam=fit.grid.lam,
        w_hat=fit.node_means, L=np.array([sol.hessian_factor.L for sol in fit.inner]).reshape(len(fit.inner), fit.m, fit.m),
        latent_names=np.array(fit.latent_names, dtype=str),
    )


def load_fit(directory):
    """Rebuild a :class:`~elgm.inference.FitResult` (without its model) from :func:`save_fit` output."""
    from .inference import FitConfig, FitResult, InnerSolution
    from .numkernels import CholeskyFactor
    from .quadrature import AdaptedGrid

    directory = Path(directory)
    meta = read_toml(directory / "fit.toml")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported fit format version {meta.get('format_version')!r}")
    arr = np.load(directory / "fit_nodes.npz")
    info = meta["fit"]
    tol = meta["tolerances"]
    config = FitConfig(k=info["k"], tol_inner=tol["inner"], tol_outer=tol["outer"], max_iter=tol["max_iter"])
    grid = AdaptedGrid(arr["theta_hat"], arr["cholesky_out"], arr["z"], arr["nodes"], arr["raw_weights"], arr["log_values"], arr["lam"])
    inner = []
    for theta, w, L, lv in zip(arr["nodes"], arr["w_hat"], arr["L"], arr["log_values"]):
        logdet = float(2.0 * np.sum(np.log(np.diag(L)))) if L.size else 0.0
        inner.append(InnerSolution(theta, w, CholeskyFactor(L, logdet), float(lv)))
    return FitResult(
        theta_hat=arr["theta_hat"], hessian_out=arr["hessian_out"], cholesky_out=arr["cholesky_out"],
        grid=grid, inner=inner, log_evidence=info["log_evidence"], config=config,
        theta_names=tuple(info["theta_names"]), latent_names=tuple(str(x) for x in arr["latent_names"]),
        transform_kinds=tuple(info["transforms"]), converged=info["converged"],
        outer_iterations=info["outer_iterations"], outer_grad_norm=info["outer_grad_norm"],
        hessian_jitter=info["hessian_jitter"], timings=meta.get("timings", {}),
    )

