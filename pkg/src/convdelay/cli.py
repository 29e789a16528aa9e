"""``convdelay`` command line.

Subcommands
-----------
simulate   run a simulation study from a YAML config
fit        fit one estimator to a Criteo-format log (or a stored dataset)
evaluate   merge raw result directories into a report
split      repeated random train/test splits with held-out log-loss

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (outputs are still written), 1 anything unexpected.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import estimators as est
from .core import snapshot_at
from .delay import APPROXIMATE, EXPONENTIAL, SAMPLES, WEIBULL
from .evaluation import (
    REPORT_COLUMNS,
    RESULT_COLUMNS,
    TIMING_COLUMNS,
    build_report,
    format_summary,
    nll,
    read_table,
    runtime_summary,
    write_table,
)
from .exceptions import ConfigError, ConvDelayError, DataError, NumericalError
from .ingest import encode, fit_vocabulary, parse_criteo, read_dataset, repeated_splits
from .simulation import SimulationConfig, default_workers, run_study

logger = logging.getLogger("convdelay")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4
FIT_ESTIMATORS = (est.NAIVE, est.ORACLE, est.BA_EXPONENTIAL, est.BA_WEIBULL, est.DFM)
FIT_DEFAULTS = {
    "estimator": est.BA_EXPONENTIAL,
    "t": None,
    "window": 30.0,
    "min_count": 50,
    "categorical_columns": None,
    "integer_columns": None,
    "max_malformed": 100,
    "level": 0.95,
    "delay_sample": APPROXIMATE,
}


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def write_manifest(out, command, config, inputs, outputs, started, extra=None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": sorted(str(o) for o in outputs),
        "started_utc": started.isoformat(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "host": {
            "platform": platform.platform(),
            "machine": platform.machine(),
            "processor": platform.processor(),
            "cpu_count": os.cpu_count(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    manifest.update(extra or {})
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _int_list(text):
    try:
        return [int(s) for s in _csv_list(text)]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _replicate_range(text, total):
    try:
        lo, _, hi = text.partition(":")
        lo = int(lo) if lo else 0
        hi = int(hi) if hi else total
    except ValueError:
        raise ConfigError(f"replicate-range: expected START:STOP, got {text!r}") from None
    if not 0 <= lo < hi:
        raise ConfigError(f"replicate-range: empty or negative range {text!r}")
    return lo, hi


# --- simulate ---------------------------------------------------------------

def cmd_simulate(args):
    started = datetime.now(timezone.utc)
    cfg_dict = {}
    if args.config:
        cfg = SimulationConfig.from_yaml(args.config)
        cfg_dict = cfg.to_dict()
    overrides = {
        "replicates": args.replicates,
        "master_seed": args.master_seed,
        "estimators": _csv_list(args.estimators) if args.estimators else None,
        "steps": _int_list(args.steps) if args.steps else None,
    }
    cfg_dict.update({k: v for k, v in overrides.items() if v is not None})
    config = SimulationConfig.from_dict(cfg_dict)
    rng = _replicate_range(args.replicate_range, config.replicates) if args.replicate_range \
        else (0, config.replicates)
    workers = args.workers or default_workers()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("simulate: replicates %d..%d, %d workers", rng[0], rng[1] - 1, workers)
    t0 = time.perf_counter()
    result = run_study(config, workers=workers, replicate_range=rng)
    wall = time.perf_counter() - t0
    write_table(out / "results.csv", result.rows, RESULT_COLUMNS)
    write_table(out / "timings.csv", result.timings, TIMING_COLUMNS)
    report = build_report(result.rows, result.timings, coverage_level=config.coverage_level,
                          estimator_order=result.estimators)
    write_table(out / "report.csv", report, REPORT_COLUMNS)
    (out / "summary.txt").write_text(
        format_summary(report, runtime_summary(result.timings), title=f"simulation {out.name}")
    )
    failed = sum(r["status"] != "ok" for r in result.rows)
    write_manifest(
        out, "simulate", config.to_dict(), [args.config] if args.config else [],
        ["results.csv", "timings.csv", "report.csv", "summary.txt"], started,
        {"master_seed": config.master_seed, "replicate_range": list(rng), "workers": workers,
         "wall_time_seconds": wall, "n_fits": len(result.rows), "n_failed_fits": failed,
         "estimators": result.estimators, "steps": result.steps},
    )
    logger.info("simulate: %d fits (%d failed) in %.1fs", len(result.rows), failed, wall)
    return EXIT_OK


# --- fit --------------------------------------------------------------------

def _load_fit_config(args):
    cfg = dict(FIT_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        unknown = sorted(set(raw) - set(cfg))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown configuration key")
        cfg.update(raw)
    for key in FIT_DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["estimator"] not in FIT_ESTIMATORS:
        raise ConfigError(f"estimator: must be one of {', '.join(FIT_ESTIMATORS)}")
    if not float(cfg["window"]) > 0:
        raise ConfigError("window: must be positive")
    if cfg["delay_sample"] not in SAMPLES:
        raise ConfigError(f"delay_sample: must be one of {', '.join(SAMPLES)}")
    for key in ("categorical_columns", "integer_columns"):
        if isinstance(cfg[key], str):
            cfg[key] = _int_list(cfg[key])
    return cfg


def load_data(path, cfg, fmt):
    """Return ``(ClickData, feature_names, parse_summary)``."""
    if fmt == "dataset":
        data, names = read_dataset(path)
        return data, names, None
    rows, report = parse_criteo(path, max_malformed=int(cfg["max_malformed"]))
    try:
        vocab = fit_vocabulary(rows, cfg["categorical_columns"], cfg["integer_columns"],
                               min_count=int(cfg["min_count"]))
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from None
    return encode(rows, vocab), vocab.feature_names, report.summary()


def fit_estimator(kind, data, t, window, delay_sample=APPROXIMATE, rows=None):
    """Fit ``kind`` to ``data`` observed at time ``t``.  Returns (fit, snapshot)."""
    if rows is not None:
        data = data.subset(rows)
    snap = snapshot_at(data, t, window)
    if kind == est.NAIVE:
        return est.fit_naive(snap), snap
    if kind == est.ORACLE:
        return est.fit_oracle(data, window, rows=snap.rows), snap
    if kind == est.BA_EXPONENTIAL:
        return est.fit_bias_adjusted(snap, EXPONENTIAL, delay_sample=delay_sample), snap
    if kind == est.BA_WEIBULL:
        return est.fit_bias_adjusted(snap, WEIBULL, delay_sample=delay_sample), snap
    if kind == est.DFM:
        return est.fit_dfm(snap), snap
    raise ConfigError(f"estimator: unknown {kind!r}")


def _fit_outputs(out, beta, names, fit, snap, level):
    k = beta.shape[0]
    se = np.sqrt(np.clip(np.diag(fit.covariance), 0, None)) if fit and fit.covariance is not None \
        else [None] * k
    names = names or [f"x{j}" for j in range(k)]
    write_table(out / "coefficients.csv",
                [{"index": j, "name": names[j], "coefficient": float(beta[j]), "se": se[j]}
                 for j in range(k)], ("index", "name", "coefficient", "se"))
    from scipy.special import expit
    from ._validation import linear_predictor
    p = expit(linear_predictor(snap.X, beta))
    rows = []
    lo = hi = se_logit = None
    if fit is not None and fit.covariance is not None:
        se_logit = fit.logit_se(snap.X)
        lo, hi = fit.confidence_interval(snap.X, level)
    for i in range(snap.n):
        rows.append({
            "row": int(snap.rows[i]), "age": float(snap.age[i]), "status": int(snap.status[i]),
            "probability": float(p[i]),
            "se_logit": None if se_logit is None else float(se_logit[i]),
            "ci_low": None if lo is None else float(lo[i]),
            "ci_high": None if hi is None else float(hi[i]),
        })
    write_table(out / "predictions.csv", rows,
                ("row", "age", "status", "probability", "se_logit", "ci_low", "ci_high"))


def cmd_fit(args):
    started = datetime.now(timezone.utc)
    cfg = _load_fit_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data, names, parse = load_data(args.data, cfg, args.format)
    t = float(cfg["t"]) if cfg["t"] is not None else float(data.click_time.max())
    if not t > 0:
        raise ConfigError("t: analysis time must be positive")
    status, code, message, diagnostics = "ok", EXIT_OK, "", {}
    t0 = time.perf_counter()
    try:
        fit, snap = fit_estimator(cfg["estimator"], data, t, float(cfg["window"]),
                                  cfg["delay_sample"])
        beta = fit.beta_c
        diagnostics = fit.diagnostics
    except NumericalError as exc:
        status, code, message = type(exc).__name__, EXIT_NUMERICAL, str(exc)
        fit = None
        snap = snapshot_at(data, t, float(cfg["window"]))
        # only conversion-coefficient iterates are worth writing
        conv_stage = exc.stage is None or str(exc.stage).startswith("step3")
        beta = exc.result.argmin[: data.k] if exc.result is not None and conv_stage else None
        logger.error("fit did not converge: %s", exc)
    wall = time.perf_counter() - t0
    outputs = []
    if beta is not None:
        _fit_outputs(out, np.asarray(beta), names, fit, snap, float(cfg["level"]))
        outputs = ["coefficients.csv", "predictions.csv"]
    write_manifest(
        out, "fit", cfg, [args.data], outputs, started,
        {"analysis_time": t, "status": status, "message": message,
         "converged": status == "ok", "best_iterate_written": status != "ok" and bool(outputs),
         "n_clicks": snap.n, "n_converted": snap.n_converted, "k": data.k,
         "wall_time_seconds": wall, "diagnostics": diagnostics, "parse_report": parse},
    )
    return code


# --- evaluate ---------------------------------------------------------------

def _load_results(dirs):
    rows, timings, seen = [], [], set()
    configs = []
    for d in dirs:
        d = Path(d)
        path = d / "results.csv"
        if not path.is_file():
            raise DataError(f"{d}: no results.csv")
        part = read_table(path)
        if not part:
            raise DataError(f"{path}: no result rows")
        for r in part:
            key = (r["replicate"], r["step"], r["estimator"])
            if key in seen:
                raise DataError(f"{path}: duplicate fit {key} across result directories")
            seen.add(key)
        rows += part
        if (d / "timings.csv").is_file():
            timings += read_table(d / "timings.csv")
        man = d / "manifest.json"
        if man.is_file():
            with open(man) as fh:
                configs.append(json.load(fh).get("config"))
    return rows, timings, configs


def cmd_evaluate(args):
    started = datetime.now(timezone.utc)
    if not args.results:
        raise DataError("no result directories given")
    rows, timings, configs = _load_results(args.results)
    level = configs[0].get("coverage_level", 0.95) if configs and configs[0] else 0.95
    order = []
    for r in rows:
        if r["estimator"] not in order:
            order.append(r["estimator"])
    order.sort(key=lambda e: est.ESTIMATOR_KINDS.index(e) if e in est.ESTIMATOR_KINDS else 99)
    report = build_report(rows, timings, coverage_level=level, estimator_order=order)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "report.csv", report, REPORT_COLUMNS)
    (out / "summary.txt").write_text(format_summary(report, runtime_summary(timings)))
    inputs = [Path(d) / "results.csv" for d in args.results]
    write_manifest(out, "evaluate", {"coverage_level": level}, inputs,
                   ["report.csv", "summary.txt"], started,
                   {"n_fits": len(rows), "sources": [str(d) for d in args.results]})
    return EXIT_OK


# --- split ------------------------------------------------------------------

def cmd_split(args):
    started = datetime.now(timezone.utc)
    cfg = _load_fit_config(args)
    estimators = _csv_list(args.estimators) if args.estimators else [cfg["estimator"]]
    for e in estimators:
        if e not in FIT_ESTIMATORS:
            raise ConfigError(f"estimators: unknown estimator {e!r}")
    if not 0 < args.fraction < 1:
        raise ConfigError("fraction: must lie in (0, 1)")
    rows_raw, parse = parse_criteo(args.data, max_malformed=int(cfg["max_malformed"]))
    if not rows_raw:
        raise DataError(f"{args.data}: no rows")
    window = float(cfg["window"])
    origin = min(r.click_timestamp for r in rows_raw)
    out_rows = []
    for rep, train_idx, test_idx in repeated_splits(len(rows_raw), args.fraction,
                                                    args.repeats, args.seed):
        train = [rows_raw[i] for i in train_idx]
        test = [rows_raw[i] for i in test_idx]
        if not train or not test:
            raise DataError(f"split {rep}: empty training or test set")
        vocab = fit_vocabulary(train, cfg["categorical_columns"], cfg["integer_columns"],
                               min_count=int(cfg["min_count"]), time_origin=origin)
        dtrain, dtest = encode(train, vocab), encode(test, vocab)
        t = float(cfg["t"]) if cfg["t"] is not None else float(dtrain.click_time.max())
        test_y = dtest.eventual_status(window)
        for e in estimators:
            row = {"split": rep, "estimator": e, "n_train": len(train), "n_test": len(test),
                   "status": "ok", "nll": None, "wall_time": None}
            t0 = time.perf_counter()
            try:
                fit, _ = fit_estimator(e, dtrain, t, window, cfg["delay_sample"])
                row["nll"] = nll(test_y, fit.predict_proba(dtest.X))
            except NumericalError as exc:
                row["status"] = type(exc).__name__
            row["wall_time"] = time.perf_counter() - t0
            out_rows.append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "splits.csv", out_rows,
                ("split", "estimator", "n_train", "n_test", "status", "nll", "wall_time"))
    summary = []
    for e in estimators:
        vals = [r["nll"] for r in out_rows if r["estimator"] == e and r["status"] == "ok"]
        summary.append({"estimator": e, "n_ok": len(vals),
                        "n_failed": args.repeats - len(vals),
                        "mean_nll": float(np.mean(vals)) if vals else None})
    write_table(out / "split_summary.csv", summary, ("estimator", "n_ok", "n_failed", "mean_nll"))
    failed = any(s["n_failed"] for s in summary)
    write_manifest(out, "split", {**cfg, "fraction": args.fraction, "repeats": args.repeats,
                                  "seed": args.seed, "estimators": estimators},
                   [args.data], ["splits.csv", "split_summary.csv"], started,
                   {"parse_report": parse.summary()})
    return EXIT_NUMERICAL if failed else EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_fit_options(p):
    p.add_argument("--config", help="YAML file with fit options (flags take precedence)")
    p.add_argument("--t", type=float, help="analysis time in days (default: last click)")
    p.add_argument("--window", type=float, help="conversion window W in days (default 30)")
    p.add_argument("--min-count", type=int, dest="min_count",
                   help="rarer categorical tokens fold into 'other' (default 50)")
    p.add_argument("--categorical-columns", dest="categorical_columns",
                   help="comma-separated categorical columns 0..8 to use (default all)")
    p.add_argument("--integer-columns", dest="integer_columns",
                   help="comma-separated integer columns 0..7 to use (default all)")
    p.add_argument("--max-malformed", type=int, dest="max_malformed",
                   help="abort after this many malformed lines (default 100)")
    p.add_argument("--delay-sample", choices=SAMPLES, dest="delay_sample",
                   help="rows used by the delay fit of bias-adjusted estimators")


def build_parser():
    parser = argparse.ArgumentParser(prog="convdelay", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--config", help="YAML study configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int,
                   help="parallel replicate workers (default: $CONVDELAY_WORKERS or CPU count)")
    p.add_argument("--replicates", type=int, help="override the number of replicates")
    p.add_argument("--replicate-range", dest="replicate_range",
                   help="run only replicates START:STOP (for mergeable partial runs)")
    p.add_argument("--master-seed", type=int, dest="master_seed")
    p.add_argument("--estimators", help="comma-separated estimator list")
    p.add_argument("--steps", help="comma-separated time steps (1-based)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an estimator to click data")
    p.add_argument("--data", required=True, help="Criteo TSV (optionally .gz) or dataset file")
    p.add_argument("--format", choices=("criteo", "dataset"), default="criteo")
    p.add_argument("--estimator", choices=FIT_ESTIMATORS)
    p.add_argument("--level", type=float, help="confidence level for intervals (default 0.95)")
    p.add_argument("--out", required=True)
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="aggregate raw simulation results")
    p.add_argument("results", nargs="*", help="result directories written by 'simulate'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("split", help="repeated train/test splits with held-out NLL")
    p.add_argument("--data", required=True, help="Criteo TSV")
    p.add_argument("--fraction", type=float, default=0.1, help="training fraction (default 0.1)")
    p.add_argument("--repeats", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", help="comma-separated estimators (default: --estimator)")
    p.add_argument("--estimator", choices=FIT_ESTIMATORS)
    p.add_argument("--out", required=True)
    _add_fit_options(p)
    p.set_defaults(func=cmd_split)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except ConvDelayError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except yaml.YAMLError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
