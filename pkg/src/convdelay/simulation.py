"""Synthetic campaigns and replicate orchestration.

A study draws one covariate population and click-time vector (kept fixed
across replicates by default), calibrates the two intercepts so that the
average conversion probability and the average delay hit their targets, and
then, per replicate, draws eventual statuses and delays.  Every replicate uses
its own ``SeedSequence(master_seed, spawn_key=(1, r))`` stream, so results do
not depend on how replicates are scheduled over workers.
"""

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import yaml
from scipy.optimize import brentq
from scipy.special import expit
from scipy.special import gamma as gamma_fn
from threadpoolctl import threadpool_limits

from . import estimators as est
from .core import ClickData, snapshot_at
from .delay import EXPONENTIAL, WEIBULL, DelayModel
from .evaluation import (
    RESULT_COLUMNS,
    TIMING_COLUMNS,
    average_bias,
    mean_absolute_bias,
    nll,
    weighted_bias,
)
from .exceptions import CalibrationFailed, ConfigError, ConvDelayError

logger = logging.getLogger(__name__)

FACTOR_PROBABILITY = (0.1, 0.3, 0.6)
FACTOR_DELAY = (2.0, 4.0, 7.0)

# Non-intercept coefficients: 0.5 * standard normal, numpy default_rng(2018).
DEFAULT_CONVERSION_COEFFICIENTS = (
    0.3092, 0.1547, -0.1843, -0.5401, -0.1411, -0.2114, -0.2796, -0.7298,
    -0.0200, -0.2749, 0.9066, -0.3728, 0.5809, -0.1812, 0.2983, -0.0250,
    -0.1309, -0.6400, -0.9296, 0.1454,
)
# Effects on the exponential log-rate; negated for the Weibull log-scale so a
# covariate shifts the mean delay the same way under both families.
DEFAULT_DELAY_COEFFICIENTS = (
    0.1992, -0.7158, -0.3663, -0.0285, -0.1337, -0.0552, 0.2919, -0.4223,
    0.0217, -0.3183, 0.1350, -0.3968, 0.3224, -0.6210, 0.1081, 0.3070,
    -0.1218, -0.4882, -0.2566, -0.0316,
)
DEFAULT_COVARIATES = (
    {"kind": "categorical", "cardinality": 6},
    {"kind": "categorical", "cardinality": 6},
    {"kind": "categorical", "cardinality": 7},
    {"kind": "integer", "low": 0, "high": 3},
    {"kind": "integer", "low": 0, "high": 3},
    {"kind": "integer", "low": 0, "high": 3},
    {"kind": "integer", "low": 0, "high": 3},
)
STUDY1_ESTIMATORS = (est.NAIVE, est.ORACLE, est.BA_EXPONENTIAL, est.BA_TRUE, est.DFM)
STUDY2_ESTIMATORS = (est.NAIVE, est.ORACLE, est.BA_EXPONENTIAL, est.BA_WEIBULL, est.DFM)


def covariate_width(spec):
    if spec["kind"] == "categorical":
        return int(spec["cardinality"]) - 1
    return 1


def _validate_covariate(i, spec):
    where = f"covariates[{i}]"
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"{where}: expected a mapping with a 'kind' key")
    if spec["kind"] == "categorical":
        if int(spec.get("cardinality", 0)) < 2:
            raise ConfigError(f"{where}.cardinality must be at least 2")
    elif spec["kind"] == "integer":
        if int(spec.get("high", 0)) < int(spec.get("low", 0)):
            raise ConfigError(f"{where}: high must be >= low")
    else:
        raise ConfigError(f"{where}.kind must be 'categorical' or 'integer'")


@dataclass
class SimulationConfig:
    n_clicks: int = 8500
    horizon_days: float = 60.0
    window_days: float = 30.0
    delay_family: str = EXPONENTIAL
    weibull_shape: float = 0.5
    target_mean_probability: float = 0.3
    target_mean_delay_days: float = 4.0
    covariates: list = field(default_factory=lambda: [dict(c) for c in DEFAULT_COVARIATES])
    conversion_coefficients: Optional[list] = None
    delay_coefficients: Optional[list] = None
    n_time_steps: int = 17
    replicates: int = 200
    master_seed: int = 20240601
    estimators: Optional[list] = None
    steps: Optional[list] = None
    fixed_design: bool = True
    coverage_level: float = 0.95
    ci_scale: str = "logit"
    delay_sample: str = "approximate"

    def __post_init__(self):
        try:
            self.validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config: malformed value ({exc})") from None

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(int(self.n_clicks) >= 2, "n_clicks", "must be at least 2")
        need(self.horizon_days > 0, "horizon_days", "must be positive")
        need(self.window_days > 0, "window_days", "must be positive")
        need(self.delay_family in (EXPONENTIAL, WEIBULL), "delay_family",
             "must be 'exponential' or 'weibull'")
        need(self.weibull_shape > 0, "weibull_shape", "must be positive")
        need(0 < self.target_mean_probability < 1, "target_mean_probability",
             "must lie in (0, 1)")
        need(self.target_mean_delay_days > 0, "target_mean_delay_days", "must be positive")
        need(int(self.n_time_steps) >= 1, "n_time_steps", "must be at least 1")
        need(int(self.replicates) >= 1, "replicates", "must be at least 1")
        need(0 < self.coverage_level < 1, "coverage_level", "must lie in (0, 1)")
        need(self.ci_scale in ("logit", "probability"), "ci_scale",
             "must be 'logit' or 'probability'")
        need(self.delay_sample in ("approximate", "converted"), "delay_sample",
             "must be 'approximate' or 'converted'")
        need(isinstance(self.covariates, (list, tuple)), "covariates", "must be a list")
        for i, c in enumerate(self.covariates):
            _validate_covariate(i, c)
        width = sum(covariate_width(c) for c in self.covariates)
        for name in ("conversion_coefficients", "delay_coefficients"):
            v = getattr(self, name)
            if v is not None:
                need(len(v) == width, name, f"needs {width} values (one per design column "
                     "after the intercept)")
                need(all(math.isfinite(float(x)) for x in v), name, "values must be finite")
        if self.estimators is not None:
            for e in self.estimators:
                need(e in est.ESTIMATOR_KINDS, "estimators", f"unknown estimator {e!r}")
        if self.steps is not None:
            for s in self.steps:
                need(1 <= int(s) <= int(self.n_time_steps), "steps",
                     f"step {s} outside 1..{self.n_time_steps}")

    @property
    def k(self):
        return 1 + sum(covariate_width(c) for c in self.covariates)

    def resolved_conversion_coefficients(self):
        if self.conversion_coefficients is not None:
            return np.asarray(self.conversion_coefficients, dtype=float)
        return _default_coefficients(DEFAULT_CONVERSION_COEFFICIENTS, self.k - 1)

    def resolved_delay_coefficients(self):
        if self.delay_coefficients is not None:
            return np.asarray(self.delay_coefficients, dtype=float)
        c = _default_coefficients(DEFAULT_DELAY_COEFFICIENTS, self.k - 1)
        return c if self.delay_family == EXPONENTIAL else -c

    def resolved_estimators(self):
        if self.estimators is not None:
            return list(self.estimators)
        return list(STUDY1_ESTIMATORS if self.delay_family == EXPONENTIAL else STUDY2_ESTIMATORS)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown configuration key")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        flat = {}
        for key, value in raw.items():
            if key in ("design", "factors", "study") and isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        return cls.from_dict(flat)


def _default_coefficients(values, width):
    if width != len(values):
        raise ConfigError(
            f"coefficients: default coefficients cover {len(values)} columns but the "
            f"covariate spec has {width}; supply coefficients explicitly"
        )
    return np.asarray(values, dtype=float)


def _rng(master_seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))


def draw_covariates(covariates, n, rng):
    """Dense design with intercept, reference-coded dummies and integer columns."""
    cols = [np.ones(n)]
    for spec in covariates:
        if spec["kind"] == "categorical":
            level = rng.integers(0, int(spec["cardinality"]), size=n)
            for j in range(1, int(spec["cardinality"])):
                cols.append((level == j).astype(float))
        else:
            cols.append(rng.integers(int(spec["low"]), int(spec["high"]) + 1, size=n).astype(float))
    return np.column_stack(cols)


@dataclass(frozen=True)
class Population:
    click_time: np.ndarray
    X: np.ndarray


def draw_population(config, rng):
    t = np.sort(rng.uniform(0.0, config.horizon_days, size=int(config.n_clicks)))
    return Population(t, draw_covariates(config.covariates, int(config.n_clicks), rng))


def reference_population(config):
    return draw_population(config, _rng(config.master_seed, 0))


@dataclass(frozen=True)
class Calibration:
    beta_c: np.ndarray
    delay: DelayModel


def _bisect(f, name):
    lo, hi = -20.0, 20.0
    flo, fhi = f(lo), f(hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
        raise CalibrationFailed(f"{name}: target unreachable with intercept in [-20, 20]")
    return brentq(f, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=500)


def calibrate_intercepts(config, population=None):
    """Set both intercepts so the population averages hit the targets.

    The mean conversion probability is matched within 1e-4 and the mean delay
    (exponential ``1/lambda``, Weibull ``scale * Gamma(1 + 1/shape)``) within
    1e-3 relative; the achieved tolerance is far tighter in practice.
    """
    pop = population if population is not None else reference_population(config)
    X = pop.X
    rest_c = X[:, 1:] @ config.resolved_conversion_coefficients()
    rest_d = X[:, 1:] @ config.resolved_delay_coefficients()
    target_p = config.target_mean_probability
    b0c = _bisect(lambda b: float(np.mean(expit(b + rest_c))) - target_p, "conversion intercept")

    log_target = math.log(config.target_mean_delay_days)
    if config.delay_family == EXPONENTIAL:
        def f(b):
            return float(np.log(np.mean(np.exp(-(b + rest_d))))) - log_target
    else:
        g = gamma_fn(1.0 + 1.0 / config.weibull_shape)

        def f(b):
            return float(np.log(np.mean(np.exp(b + rest_d)) * g)) - log_target

    b0d = _bisect(f, "delay intercept")
    beta_c = np.concatenate([[b0c], config.resolved_conversion_coefficients()])
    beta_d = np.concatenate([[b0d], config.resolved_delay_coefficients()])
    shape = config.weibull_shape if config.delay_family == WEIBULL else None
    return Calibration(beta_c, DelayModel(config.delay_family, beta_d, shape))


def time_steps(click_times, n_steps):
    """Empirical click-time quantiles at levels ``j / n_steps``.

    Step ``j`` is the ``ceil(j n / n_steps)``-th smallest click time, so each
    interval holds ``n / n_steps`` clicks up to rounding and the last step is
    the latest click.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    t = np.sort(np.asarray(click_times, dtype=float))
    n = t.shape[0]
    idx = np.array([math.ceil(j * n / n_steps) - 1 for j in range(1, n_steps + 1)])
    return t[np.clip(idx, 0, n - 1)]


@dataclass(frozen=True)
class ReplicateOutput:
    dataset: ClickData
    true_beta_c: np.ndarray
    true_delay: DelayModel
    true_probabilities: np.ndarray
    time_steps: np.ndarray
    replicate: int


def simulate_replicate(config, replicate_index, calibration=None, population=None):
    """Draw one replicate; deterministic in ``(master_seed, replicate_index)``."""
    if config.fixed_design:
        pop = population if population is not None else reference_population(config)
    else:
        pop = draw_population(config, _rng(config.master_seed, 2, int(replicate_index)))
    cal = calibration if calibration is not None else calibrate_intercepts(config)
    rng = _rng(config.master_seed, 1, int(replicate_index))
    n = pop.click_time.shape[0]
    p = expit(pop.X @ cal.beta_c)
    converts = rng.random(n) < p
    eta_d = pop.X @ cal.delay.coef
    if cal.delay.family == EXPONENTIAL:
        delay = rng.exponential(1.0, size=n) * np.exp(-eta_d)
    else:
        delay = rng.weibull(cal.delay.shape, size=n) * np.exp(eta_d)
    converts &= delay < config.window_days
    converts &= delay > 0
    conv_time = np.where(converts, pop.click_time + delay, np.nan)
    data = ClickData(pop.click_time, conv_time, pop.X)
    steps = time_steps(pop.click_time, int(config.n_time_steps))
    return ReplicateOutput(data, cal.beta_c, cal.delay, p, steps, int(replicate_index))


# --- study driver ----------------------------------------------------------

def _fit_one(kind, snap, rep, config):
    if kind == est.NAIVE:
        return est.fit_naive(snap)
    if kind == est.ORACLE:
        return est.fit_oracle(rep.dataset, config.window_days, rows=snap.rows)
    if kind == est.BA_EXPONENTIAL:
        return est.fit_bias_adjusted(snap, EXPONENTIAL, delay_sample=config.delay_sample)
    if kind == est.BA_WEIBULL:
        return est.fit_bias_adjusted(snap, WEIBULL, delay_sample=config.delay_sample)
    if kind == est.BA_TRUE:
        return est.fit_bias_adjusted(snap, rep.true_delay)
    if kind == est.DFM:
        return est.fit_dfm(snap)
    raise ValueError(kind)


def _iterations(fit):
    for stage in ("lbfgs", "step3", "logistic"):
        if stage in fit.diagnostics:
            return int(fit.diagnostics[stage]["iterations"])
    return 0


def _status_of(exc):
    name = type(exc).__name__
    return "nonconvergence" if name == "NonConvergence" else name


def evaluate_fit(fit, snap, p_true, eventual, config):
    p_hat = fit.predict_proba(snap.X)
    out = {
        "avg_bias": average_bias(p_true, p_hat),
        "abs_bias": mean_absolute_bias(p_true, p_hat),
        "weighted_bias": weighted_bias(p_true, p_hat),
        "nll": nll(eventual, p_hat),
        "coverage": float("nan"),
        "mean_se_logit": float("nan"),
    }
    if fit.covariance is not None:
        lo, hi = fit.confidence_interval(snap.X, config.coverage_level, config.ci_scale)
        out["coverage"] = float(np.mean((lo <= p_true) & (p_true <= hi)))
        out["mean_se_logit"] = float(np.mean(fit.logit_se(snap.X)))
    return out


def run_replicate(config, r, estimators, steps, calibration, population):
    rep = simulate_replicate(config, r, calibration, population)
    eventual_all = rep.dataset.eventual_status(config.window_days)
    rows, timings = [], []
    for j in steps:
        t = float(rep.time_steps[j - 1])
        snap = snapshot_at(rep.dataset, t, config.window_days)
        p_true = rep.true_probabilities[snap.rows]
        eventual = eventual_all[snap.rows]
        for kind in estimators:
            row = {
                "replicate": r, "step": j, "t": t, "estimator": kind,
                "n_clicks": snap.n, "n_converted": snap.n_converted,
                "status": "ok", "converged": 1, "iterations": 0,
                "avg_bias": float("nan"), "abs_bias": float("nan"),
                "weighted_bias": float("nan"), "nll": float("nan"),
                "coverage": float("nan"), "mean_se_logit": float("nan"),
            }
            t0 = time.perf_counter()
            try:
                fit = _fit_one(kind, snap, rep, config)
            except (ConvDelayError, np.linalg.LinAlgError) as exc:
                wall = time.perf_counter() - t0
                row["status"] = _status_of(exc)
                row["converged"] = 0
                if getattr(exc, "result", None) is not None:
                    row["iterations"] = int(exc.result.iterations)
            else:
                wall = time.perf_counter() - t0
                row.update(evaluate_fit(fit, snap, p_true, eventual, config))
                row["iterations"] = _iterations(fit)
            rows.append(row)
            timings.append({"replicate": r, "step": j, "estimator": kind, "wall_time": wall})
    return rows, timings


def _worker(args):
    config_dict, r, estimators, steps = args
    config = SimulationConfig.from_dict(config_dict)
    with threadpool_limits(limits=1):
        return run_replicate(config, r, estimators, steps, calibrate_intercepts(config),
                             reference_population(config) if config.fixed_design else None)


@dataclass
class StudyResult:
    config: SimulationConfig
    rows: list
    timings: list
    estimators: list
    steps: list


def default_workers():
    env = os.environ.get("CONVDELAY_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_study(config, estimators=None, *, steps=None, workers=1, replicate_range=None):
    """Fit every estimator on every (replicate, time step) snapshot.

    Failed fits are kept as rows with a non-``ok`` status.  Rows come back
    ordered by (replicate, step, estimator position) whatever the number of
    workers.
    """
    estimators = list(estimators or config.resolved_estimators())
    for e in estimators:
        if e not in est.ESTIMATOR_KINDS:
            raise ConfigError(f"estimators: unknown estimator {e!r}")
    steps = list(steps or config.steps or range(1, int(config.n_time_steps) + 1))
    start, stop = replicate_range or (0, int(config.replicates))
    reps = list(range(int(start), int(stop)))
    workers = max(1, int(workers or 1))
    if workers == 1:
        with threadpool_limits(limits=1):
            cal = calibrate_intercepts(config)
            pop = reference_population(config) if config.fixed_design else None
            parts = [run_replicate(config, r, estimators, steps, cal, pop) for r in reps]
    else:
        payload = [(config.to_dict(), r, estimators, steps) for r in reps]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_worker, payload, chunksize=max(1, len(reps) // (4 * workers))))
    rows = [row for p in parts for row in p[0]]
    timings = [t for p in parts for t in p[1]]
    order = {e: i for i, e in enumerate(estimators)}
    rows.sort(key=lambda d: (d["replicate"], d["step"], order[d["estimator"]]))
    timings.sort(key=lambda d: (d["replicate"], d["step"], order[d["estimator"]]))
    return StudyResult(config, rows, timings, estimators, steps)


def synthetic_criteo_rows(n, seed, *, mean_probability=0.3, mean_delay_days=4.0,
                          horizon_days=60.0, window_days=30.0, start_timestamp=1_500_000_000):
    """Criteo-format rows from a small known model, for fixtures and demos.

    Conversion depends on categorical column 0 (tokens ``a``..``d``) and on
    integer column 0; the delay is exponential with a mean that depends on
    categorical column 1.  Conversions with delay at or beyond the window
    are not recorded.  Some integer and categorical values are left missing.
    """
    from .ingest import CriteoRow, N_CATEGORICAL, N_INTEGER

    rng = np.random.default_rng(seed)
    click = np.sort(rng.uniform(0, horizon_days * 86400.0, n)).astype(np.int64) + start_timestamp
    cat0 = rng.integers(0, 4, n)
    cat1 = rng.integers(0, 3, n)
    int0 = rng.poisson(3.0, n)
    base = math.log(mean_probability / (1 - mean_probability))
    p = expit(base + np.array([0.0, 0.6, -0.6, 0.3])[cat0] + 0.15 * (int0 - 3))
    mean_d = mean_delay_days * np.array([0.5, 1.0, 1.5])[cat1]
    delay = rng.exponential(mean_d) * 86400.0
    converts = (rng.random(n) < p) & (delay < window_days * 86400.0)
    rows = []
    for i in range(n):
        ints = [int(int0[i])] + [int(v) if rng.random() > 0.1 else None
                                 for v in rng.poisson(5.0, N_INTEGER - 1)]
        cats = ["abcd"[cat0[i]], "xyz"[cat1[i]]] + [
            None if rng.random() < 0.05 else f"t{rng.integers(0, 5)}"
            for _ in range(N_CATEGORICAL - 2)
        ]
        conv = int(click[i] + max(1, round(delay[i]))) if converts[i] else None
        rows.append(CriteoRow(int(click[i]), conv, tuple(ints), tuple(cats)))
    return rows


def write_criteo(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fields_ = [str(r.click_timestamp), "" if r.conversion_timestamp is None
                       else str(r.conversion_timestamp)]
            fields_ += ["" if v is None else str(v) for v in r.integer_features]
            fields_ += ["" if v is None else v for v in r.categorical_features]
            fh.write("\t".join(fields_) + "\n")
