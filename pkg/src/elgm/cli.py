"""``elgm`` command line: fit, sample, summarize, validate, simulate, bench.

Configuration comes from a TOML file of flat dotted keys (``--config``),
overridden by flags. Every run that writes output also writes
``manifest.toml`` (``sample_manifest.toml`` for ``sample``, so a fit's own
manifest is kept) holding the command, version and resolved configuration.
Failures print ``error: <ErrorClass>: <message>`` on one stderr line and
exit with status 2 (1 for a failed validation).
"""

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import data as io_
from .errors import ConfigError, DataError, DimensionCapError, ElgmError, ValidationFailure
from .inference import FitConfig, fit, latent_summaries, sample_posterior, theta_marginal, theta_summaries
from .simulate import build_model, schema_for, simulate
from .validation import brute_force_posterior, compare_fit_to_oracle, grid_around

MODELS = ("conjugate", "gaussian-scale", "bernoulli-glmm", "cox", "poisson-aggregate")


@dataclass
class RunConfig:
    model: str = ""
    model_options: dict = field(default_factory=dict)
    data: str = ""
    simulate: dict = field(default_factory=dict)
    k: int = 3
    tol_inner: float = 1e-8
    tol_outer: float = 1e-6
    max_iter: int = 200
    B: int = 1000
    seed: int = 0
    out: str = ""
    threads: int = 1
    format: str = "csv"
    ks_max: float = 0.05
    grid_points: int = 0
    bench_n: list = field(default_factory=list)
    reps: int = 3

    def fit_config(self):
        return FitConfig(k=self.k, tol_inner=self.tol_inner, tol_outer=self.tol_outer, max_iter=self.max_iter, threads=self.threads)

    def flat(self, include_out=True):
        """Flat dotted-key view, the same layout accepted by ``--config``."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model_options":
                out.update({f"model.{k}": x for k, x in sorted(v.items())})
            elif f.name == "simulate":
                out.update({f"simulate.{k}": x for k, x in sorted(v.items())})
            elif f.name == "out" and not include_out:
                continue
            else:
                out[_FLAT_NAMES.get(f.name, f.name)] = v
        return out


# flat key -> RunConfig field
_KEYS = {
    "model.name": "model",
    "data.path": "data",
    "fit.k": "k",
    "fit.tol_inner": "tol_inner",
    "fit.tol_outer": "tol_outer",
    "fit.max_iter": "max_iter",
    "sample.B": "B",
    "run.seed": "seed",
    "run.out": "out",
    "run.threads": "threads",
    "run.format": "format",
    "validate.ks_max": "ks_max",
    "validate.grid_points": "grid_points",
    "bench.n": "bench_n",
    "bench.reps": "reps",
}
_FLAT_NAMES = {v: k for k, v in _KEYS.items()}
_MODEL_OPTIONS = {"frailty", "beta_variance", "sd_rate", "prior_mean", "prior_sd"}
_SIM_OPTIONS = {
    "n", "ybar", "theta", "d1", "d2", "beta", "sigma1", "sigma2", "frailty_sd", "d", "censor_quantile",
    "regions", "cells_per_region", "n_cells", "sigma", "population_low", "population_high",
}


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_kv(text):
    """Parse ``"a=1,b=x"`` into a dict with numeric values where possible."""
    out = {}
    if not text:
        return out
    bad = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            bad.append(part)
            continue
        k, v = (s.strip() for s in part.split("=", 1))
        out[k] = _scalar(v)
    if bad:
        raise ConfigError(f"expected key=value, got {', '.join(bad)}", keys=bad)
    return out


def _scalar(v):
    if not isinstance(v, str):
        return v
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def apply_flat(cfg, flat):
    """Apply flat dotted keys to ``cfg``; every unknown key is reported at once."""
    unknown = []
    for key, value in flat.items():
        if key in _KEYS:
            setattr(cfg, _KEYS[key], value)
        elif key.startswith("model.") and key[6:] in _MODEL_OPTIONS:
            cfg.model_options[key[6:]] = value
        elif key.startswith("simulate.") and key[9:] in _SIM_OPTIONS:
            cfg.simulate[key[9:]] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}", keys=unknown)
    return cfg


def load_config_file(path):
    try:
        doc = io_.read_toml(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", keys=[]) from None
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", keys=[]) from None
    doc.pop("format_version", None)
    return _flatten(doc)


def resolve_config(args):
    cfg = RunConfig()
    if os.environ.get("ELGM_THREADS"):
        try:
            cfg.threads = int(os.environ["ELGM_THREADS"])
        except ValueError:
            raise ConfigError("ELGM_THREADS must be an integer", keys=["ELGM_THREADS"]) from None
    if getattr(args, "config", None):
        apply_flat(cfg, load_config_file(args.config))
    flags = {}
    for name in ("model", "data", "k", "tol_inner", "tol_outer", "max_iter", "B", "seed", "out", "threads", "format", "ks_max", "grid_points", "reps"):
        v = getattr(args, name, None)
        if v is not None:
            flags[_FLAT_NAMES[name]] = v
    if getattr(args, "n", None) is not None:
        if args.command == "bench":
            flags["bench.n"] = [int(x) for x in str(args.n).split(",") if x.strip()]
        else:
            flags["simulate.n"] = int(args.n)
    for key, value in parse_kv(getattr(args, "simulate", None) or "").items():
        flags[f"simulate.{key}"] = value
    for opt in getattr(args, "option", None) or []:
        for key, value in parse_kv(opt).items():
            flags[f"model.{key}"] = value
    apply_flat(cfg, flags)
    _check(cfg)
    return cfg


def _check(cfg):
    bad = []
    if cfg.model and cfg.model not in MODELS:
        bad.append("model.name")
    if not isinstance(cfg.k, int) or cfg.k < 1:
        bad.append("fit.k")
    for key in ("tol_inner", "tol_outer", "ks_max"):
        if not isinstance(getattr(cfg, key), (int, float)) or getattr(cfg, key) <= 0:
            bad.append(_FLAT_NAMES[key])
    if not isinstance(cfg.B, int) or cfg.B < 1:
        bad.append("sample.B")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        bad.append("run.threads")
    if cfg.format not in ("csv", "text"):
        bad.append("run.format")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        bad.append("run.seed")
    if bad:
        raise ConfigError(f"invalid value for {', '.join(bad)}", keys=bad)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _need_model(cfg):
    if not cfg.model:
        raise ConfigError("a model is required (--model or model.name)", keys=["model.name"])


def load_table(cfg):
    """Table from ``cfg.data`` or from the simulator; returns ``(table, truth)``."""
    _need_model(cfg)
    if cfg.data:
        path = Path(cfg.data)
        try:
            with open(path, encoding="utf-8") as fh:
                header = next(csv.reader(fh), [])
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        return io_.read_csv(path, schema_for(cfg.model, [h.strip() for h in header])), None
    truth = simulate(cfg.model, cfg.seed, cfg.simulate)
    return truth.table, truth


def write_manifest(cfg, out, command, extra=None, name="manifest.toml"):
    doc = {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.flat(include_out=False)}
    if extra:
        doc.update(extra)
    io_.write_toml(doc, Path(out) / name)


def _out_dir(cfg, default):
    out = Path(cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(rows, header, fmt, stream=None):
    stream = stream or sys.stdout
    if fmt == "csv":
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        stream.write("  ".join(c.rjust(wd) for c, wd in zip(r, widths)) + "\n")


def summary_rows(fit_result):
    rows = theta_summaries(fit_result) + latent_summaries(fit_result)
    return rows


def _summary_table(rows):
    return [[r["name"], io_.fmt(r["mean"]), io_.fmt(r["sd"])] + [io_.fmt(q) for q in r["quantiles"]] for r in rows]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(cfg):
    table, truth = load_table(cfg)
    model = build_model(cfg.model, table, cfg.model_options)
    result = fit(model, cfg.fit_config())
    out = _out_dir(cfg, "elgm-out")
    io_.save_fit(result, out, {"config": cfg.flat(), "seed": cfg.seed, "model": cfg.model})
    rows = summary_rows(result)
    io_.write_summaries(rows, out / "summary.csv")
    for j, name in enumerate(result.theta_names):
        marg = theta_marginal(result, j)
        io_.write_density(marg.theta, marg.density, marg.cdf, out / f"density_{name}.csv", name)
    if truth is not None:
        table.to_csv(out / "data.csv")
    write_manifest(cfg, out, "fit", {"log_evidence": io_.fmt(result.log_evidence)})
    _emit(_summary_table(rows), io_.SUMMARY_COLUMNS, cfg.format)
    return 0


def cmd_sample(cfg, fit_dir):
    result = io_.load_fit(fit_dir)
    batch = sample_posterior(result, cfg.B, cfg.seed)
    out = Path(cfg.out) if cfg.out else Path(fit_dir)
    out.mkdir(parents=True, exist_ok=True)
    io_.write_samples(batch, out / "samples.csv", result.latent_names)
    # the fit is identified by content so that the manifest does not depend on paths
    ident = {"log_evidence": io_.fmt(result.log_evidence), "theta_hat": [io_.fmt(t) for t in result.theta_hat]}
    write_manifest(cfg, out, "sample", {"fit": ident}, name="sample_manifest.toml")
    print(f"wrote {batch.B} draws to {out / 'samples.csv'}")
    return 0


def cmd_summarize(cfg, fit_dir):
    result = io_.load_fit(fit_dir)
    _emit(_summary_table(summary_rows(result)), io_.SUMMARY_COLUMNS, cfg.format)
    return 0


def _oracle_points(d, requested):
    if requested:
        return requested
    return {1: 4001, 2: 401, 3: 101, 4: 40}[d]


def cmd_validate(cfg):
    table, _ = load_table(cfg)
    model = build_model(cfg.model, table, cfg.model_options)
    result = fit(model, cfg.fit_config())
    d = model.m + model.s
    if d > 4:
        raise DimensionCapError(f"validation oracle needs m + s <= 4, model has {d}")
    npts = _oracle_points(d, cfg.grid_points)
    spec = [grid_around(r["mean"], r["sd"], npts, 7.0) for r in latent_summaries(result)]
    # the Laplace curvature gives a scale even when k = 1 leaves sd undefined
    theta_sd = np.sqrt(np.diag(result.cholesky_out @ result.cholesky_out.T))
    for j in range(model.s):
        spec.append(grid_around(result.theta_hat[j], theta_sd[j], npts, 10.0))
    oracle = brute_force_posterior(model, list(range(d)), spec)
    ks = compare_fit_to_oracle(result, oracle, cfg.B, cfg.seed)
    rows = [[name, io_.fmt(v), "pass" if v <= cfg.ks_max else "fail"] for name, v in ks.items()]
    if cfg.out:
        out = _out_dir(cfg, cfg.out)
        with open(out / "ks.csv", "w", newline="", encoding="utf-8") as fh:
            _emit(rows, ("name", "ks", "status"), "csv", fh)
        write_manifest(cfg, out, "validate")
    _emit(rows, ("name", "ks", "status"), cfg.format)
    failed = [name for name, v in ks.items() if v > cfg.ks_max]
    if failed:
        raise ValidationFailure(f"KS above {cfg.ks_max} for {', '.join(failed)}")
    return 0


def cmd_simulate(cfg):
    _need_model(cfg)
    truth = simulate(cfg.model, cfg.seed, cfg.simulate)
    out = _out_dir(cfg, "elgm-data")
    truth.table.to_csv(out / "data.csv")
    doc = {"generator": truth.generator, "seed": truth.seed, "params": truth.params}
    doc["truth"] = {k: np.asarray(v).tolist() for k, v in truth.extras.items()}
    io_.write_toml(doc, out / "truth.toml")
    write_manifest(cfg, out, "simulate")
    print(f"wrote {truth.table.n_rows} rows to {out / 'data.csv'}")
    return 0


def cmd_bench(cfg):
    _need_model(cfg)
    if not cfg.bench_n:
        raise ConfigError("bench needs a list of sizes (--n or bench.n)", keys=["bench.n"])
    if cfg.reps < 1:
        raise ConfigError("bench.reps must be positive", keys=["bench.reps"])
    rows = []
    for n in cfg.bench_n:
        times = []
        for r in range(cfg.reps):
            truth = simulate(cfg.model, cfg.seed + r, {**cfg.simulate, "n": int(n)})
            model = build_model(cfg.model, truth.table, cfg.model_options)
            t0 = time.perf_counter()
            fit(model, cfg.fit_config())
            times.append(time.perf_counter() - t0)
        t = np.array(times)
        sd = float(t.std(ddof=1)) if t.size > 1 else 0.0
        rows.append([int(n), cfg.reps, f"{t.mean():.6g}", f"{sd:.6g}", f"{np.median(t):.6g}", f"{t.min():.6g}"])
    header = ("n", "reps", "mean_s", "sd_s", "median_s", "min_s")
    if cfg.out:
        out = _out_dir(cfg, cfg.out)
        with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
            _emit(rows, header, "csv", fh)
        write_manifest(cfg, out, "bench")
    _emit(rows, header, cfg.format)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message.replace("\n", " "), keys=[])


def _common(p, sim=True):
    p.add_argument("--config", help="TOML file with flat dotted keys")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="node-solve threads (default $ELGM_THREADS or 1)")
    p.add_argument("--format", choices=("csv", "text"), help="stdout table format")
    if sim:
        p.add_argument("--data", help="input CSV")
        p.add_argument("--simulate", help='simulator options, e.g. "n=4,ybar=1"')
        p.add_argument("--option", action="append", help="model options, e.g. frailty=true")
        p.add_argument("--k", type=int, help="quadrature points per dimension")
        p.add_argument("--tol-inner", dest="tol_inner", type=float)
        p.add_argument("--tol-outer", dest="tol_outer", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)


def build_parser():
    parser = _Parser(prog="elgm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"elgm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model and write summaries")
    _common(p)

    p = sub.add_parser("sample", help="draw from a saved fit")
    p.add_argument("fit_dir")
    _common(p, sim=False)
    p.add_argument("--B", type=int, help="number of draws")

    p = sub.add_parser("summarize", help="print summaries of a saved fit")
    p.add_argument("fit_dir")
    _common(p, sim=False)

    p = sub.add_parser("validate", help="compare a fit with the brute-force oracle")
    _common(p)
    p.add_argument("--n", type=int, help="simulated sample size")
    p.add_argument("--B", type=int)
    p.add_argument("--ks-max", dest="ks_max", type=float)
    p.add_argument("--grid-points", dest="grid_points", type=int)

    p = sub.add_parser("simulate", help="write a simulated dataset and its truth")
    _common(p)
    p.add_argument("--n", type=int)

    p = sub.add_parser("bench", help="time fits over sample sizes")
    _common(p)
    p.add_argument("--n", help="comma-separated sizes")
    p.add_argument("--reps", type=int)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    if args.command == "fit":
        return cmd_fit(cfg)
    if args.command == "sample":
        return cmd_sample(cfg, args.fit_dir)
    if args.command == "summarize":
        return cmd_summarize(cfg, args.fit_dir)
    if args.command == "validate":
        return cmd_validate(cfg)
    if args.command == "simulate":
        return cmd_simulate(cfg)
    return cmd_bench(cfg)


def main(argv=None):
    try:
        return run(argv)
    except ValidationFailure as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ElgmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
