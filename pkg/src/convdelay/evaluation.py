"""Bias, log-loss, coverage and runtime metrics plus report aggregation.

Raw study results are one row per fit (see ``RESULT_COLUMNS``).  The report
groups them by (step, estimator) and averages over replicates.  Sums use
:func:`math.fsum`, so the report does not depend on the order of the raw rows.
"""

import csv
import math
from collections import defaultdict

import numpy as np
from scipy.special import expit, ndtri

LOG_CLAMP = 1e-15

RESULT_COLUMNS = (
    "replicate", "step", "t", "estimator", "n_clicks", "n_converted", "status",
    "converged", "avg_bias", "abs_bias", "weighted_bias", "nll", "coverage",
    "mean_se_logit", "iterations",
)
TIMING_COLUMNS = ("replicate", "step", "estimator", "wall_time")
REPORT_COLUMNS = (
    "step", "estimator", "mean_t", "n_fits", "n_failed", "failure_rate",
    "avg_bias", "avg_bias_sd", "abs_bias", "weighted_bias", "nll",
    "coverage", "coverage_band_low", "coverage_band_high",
    "wall_time_mean", "wall_time_sd",
)
_INT_COLUMNS = {"replicate", "step", "n_clicks", "n_converted", "converged", "iterations"}
_STR_COLUMNS = {"estimator", "status"}


def _pair(true_p, est_p):
    a = np.asarray(true_p, dtype=np.float64).reshape(-1)
    b = np.asarray(est_p, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} true vs {b.shape[0]} estimated")
    return a, b


def average_bias(true_p, est_p):
    """Mean of ``true_p - est_p``; positive means the estimate is too low."""
    a, b = _pair(true_p, est_p)
    if a.size == 0:
        raise ValueError("empty input")
    return float(np.mean(a - b))


def mean_absolute_bias(true_p, est_p):
    a, b = _pair(true_p, est_p)
    if a.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(a - b)))


def weighted_bias(true_p, est_p, *, return_excluded=False):
    """Bias weighted by ``1 / sqrt(p (1 - p))`` of the true probability.

    Clicks with ``p`` exactly 0 or 1 have no finite weight and are skipped;
    pass ``return_excluded=True`` to also get how many were skipped.
    """
    a, b = _pair(true_p, est_p)
    ok = (a > 0.0) & (a < 1.0)
    excluded = int(a.size - ok.sum())
    if not ok.any():
        value = float("nan")
    else:
        w = 1.0 / np.sqrt(a[ok] * (1.0 - a[ok]))
        value = float(np.sum(w * (a[ok] - b[ok])) / np.sum(w))
    return (value, excluded) if return_excluded else value


def nll(eventual_status, est_p):
    """Mean Bernoulli negative log-likelihood, logs clamped at 1e-15."""
    y, p = _pair(eventual_status, est_p)
    if y.size == 0:
        raise ValueError("empty input")
    lp = np.log(np.clip(p, LOG_CLAMP, 1.0))
    lq = np.log(np.clip(1.0 - p, LOG_CLAMP, 1.0))
    return float(-np.mean(y * lp + (1.0 - y) * lq))


def score_test_band(replicates, level=0.95):
    """Non-rejection region ``level +/- 2 sqrt(level (1 - level) / R)``."""
    if replicates < 1:
        raise ValueError("replicates must be positive")
    half = 2.0 * math.sqrt(level * (1.0 - level) / replicates)
    return level - half, level + half


def coverage(true_p, est_p, se_logit, level=0.95, replicates=None):
    """Share of clicks whose logit-scale Wald interval contains the truth.

    Arrays may be 1-d (one fit) or 2-d ``(replicates, clicks)``; in the latter
    case per-replicate rates are averaged.  Returns ``(rate, band)`` where
    ``band`` is the score-test region for the number of replicates.
    """
    p = np.atleast_2d(np.asarray(true_p, dtype=np.float64))
    ph = np.atleast_2d(np.asarray(est_p, dtype=np.float64))
    se = np.atleast_2d(np.asarray(se_logit, dtype=np.float64))
    if not (p.shape == ph.shape == se.shape):
        raise ValueError("true_p, est_p and se_logit must share a shape")
    if np.any(se < 0) or np.any(np.isnan(se)):
        raise ValueError("standard errors must be non-negative")
    zq = ndtri(0.5 + level / 2.0)
    with np.errstate(divide="ignore"):
        eta = np.log(ph) - np.log1p(-ph)
    with np.errstate(invalid="ignore"):
        lo = np.where(np.isinf(se), 0.0, expit(eta - zq * se))
        hi = np.where(np.isinf(se), 1.0, expit(eta + zq * se))
    inside = (lo <= p) & (p <= hi)
    rate = float(np.mean(inside.mean(axis=1)))
    return rate, score_test_band(replicates or p.shape[0], level)


def _mean(values):
    return math.fsum(values) / len(values) if values else float("nan")


def _sd(values):
    if len(values) < 2:
        return None
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1))


def runtime_summary(timings):
    """Per-estimator mean and sample SD of wall time.

    ``timings`` is an iterable of mappings with ``estimator`` and
    ``wall_time``.  The SD is ``None`` when an estimator has a single fit.
    """
    by = defaultdict(list)
    for t in timings:
        by[t["estimator"]].append(float(t["wall_time"]))
    return {
        e: {"n": len(v), "mean": _mean(sorted(v)), "sd": _sd(sorted(v))}
        for e, v in sorted(by.items())
    }


def _finite(rows, key):
    return sorted(float(r[key]) for r in rows if math.isfinite(float(r[key])))


def build_report(rows, timings=(), *, coverage_level=0.95, estimator_order=None):
    """Aggregate raw fit rows into one record per (step, estimator).

    Failed fits count towards ``failure_rate`` and are left out of every
    other average.  Wall-time columns are filled when ``timings`` is given.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[(int(r["step"]), r["estimator"])].append(r)
    if not groups:
        raise ValueError("no result rows to aggregate")
    walls = defaultdict(list)
    for t in timings:
        walls[(int(t["step"]), t["estimator"])].append(float(t["wall_time"]))
    order = {e: i for i, e in enumerate(estimator_order or [])}
    keys = sorted(groups, key=lambda k: (k[0], order.get(k[1], len(order)), k[1]))
    report = []
    for step, e in keys:
        g = groups[(step, e)]
        ok = [r for r in g if r["status"] == "ok"]
        n_reps = len({int(r["replicate"]) for r in ok})
        band = score_test_band(n_reps, coverage_level) if n_reps else (float("nan"),) * 2
        w = sorted(walls.get((step, e), []))
        avg = _finite(ok, "avg_bias")
        report.append({
            "step": step,
            "estimator": e,
            "mean_t": _mean(sorted(float(r["t"]) for r in g)),
            "n_fits": len(g),
            "n_failed": len(g) - len(ok),
            "failure_rate": (len(g) - len(ok)) / len(g),
            "avg_bias": _mean(avg),
            "avg_bias_sd": _sd(avg),
            "abs_bias": _mean(_finite(ok, "abs_bias")),
            "weighted_bias": _mean(_finite(ok, "weighted_bias")),
            "nll": _mean(_finite(ok, "nll")),
            "coverage": _mean(_finite(ok, "coverage")),
            "coverage_band_low": band[0],
            "coverage_band_high": band[1],
            "wall_time_mean": _mean(w),
            "wall_time_sd": _sd(w),
        })
    return report


# --- delimited text I/O ----------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_table(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _parse(key, text):
    if key in _STR_COLUMNS:
        return text
    if text == "":
        return None
    if key in _INT_COLUMNS:
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty table")
        return [{k: _parse(k, v) for k, v in row.items()} for row in reader]


def format_summary(report, runtimes=None, title="convdelay report"):
    """Fixed-width text version of the report for humans."""
    lines = [title, ""]
    head = f"{'step':>4} {'estimator':<11} {'t':>7} {'fits':>5} {'fail':>5} " \
           f"{'avg_bias':>10} {'abs_bias':>9} {'nll':>8} {'coverage':>9}"
    lines.append(head)
    lines.append("-" * len(head))

    def f(v, width, prec):
        return f"{'-':>{width}}" if v is None or not math.isfinite(v) else f"{v:>{width}.{prec}f}"

    for r in report:
        lines.append(
            f"{r['step']:>4} {r['estimator']:<11} {r['mean_t']:>7.2f} {r['n_fits']:>5} "
            f"{r['n_failed']:>5} {f(r['avg_bias'], 10, 5)} {f(r['abs_bias'], 9, 5)} "
            f"{f(r['nll'], 8, 4)} {f(r['coverage'], 9, 4)}"
        )
    if runtimes:
        lines += ["", "wall time per fit (seconds)"]
        for e, s in runtimes.items():
            sd = "-" if s["sd"] is None else f"{s['sd']:.4f}"
            lines.append(f"  {e:<11} n={s['n']:<6} mean={s['mean']:.4f} sd={sd}")
    return "\n".join(lines) + "\n"
