import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convdelay.evaluation import (
    REPORT_COLUMNS,
    RESULT_COLUMNS,
    average_bias,
    build_report,
    coverage,
    format_summary,
    mean_absolute_bias,
    nll,
    read_table,
    runtime_summary,
    score_test_band,
    weighted_bias,
    write_table,
)


def test_bias_examples():
    assert average_bias([0.3, 0.5], [0.2, 0.6]) == pytest.approx(0.0)
    assert mean_absolute_bias([0.3, 0.5], [0.2, 0.6]) == pytest.approx(0.1)
    assert average_bias([0.4, 0.4], [0.3, 0.3]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        average_bias([0.1], [0.1, 0.2])
    with pytest.raises(ValueError):
        average_bias([], [])


def test_weighted_bias_two_clicks():
    p, q = np.array([0.5, 0.1]), np.array([0.4, 0.2])
    w = 1 / np.sqrt(p * (1 - p))
    assert weighted_bias(p, q) == pytest.approx(np.sum(w * (p - q)) / w.sum(), abs=1e-15)
    assert weighted_bias(p, q) == pytest.approx((2 * 0.1 - 0.1 / 0.3) / (2 + 1 / 0.3))


def test_weighted_bias_constant_truth_is_average(rng):
    p = np.full(50, 0.3)
    q = rng.random(50)
    assert weighted_bias(p, q) == pytest.approx(average_bias(p, q), abs=1e-14)


def test_weighted_bias_skips_degenerate_truth():
    value, excluded = weighted_bias([0.0, 0.5, 1.0], [0.1, 0.4, 0.9], return_excluded=True)
    assert excluded == 2 and value == pytest.approx(0.1)
    assert math.isnan(weighted_bias([0.0], [0.5]))


def test_nll_examples(rng):
    assert nll([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert nll([1], [0.0]) == pytest.approx(-math.log(1e-15))
    y = (rng.random(200) < 0.3).astype(float)
    grid = np.linspace(0.05, 0.95, 181)
    losses = [nll(y, np.full(200, g)) for g in grid]
    assert abs(grid[int(np.argmin(losses))] - y.mean()) <= 0.005 + 1e-12


def test_score_band():
    lo, hi = score_test_band(500)
    assert (lo, hi) == (pytest.approx(0.9305, abs=5e-5), pytest.approx(0.9695, abs=5e-5))
    lo, hi = score_test_band(2000)
    assert hi - lo == pytest.approx(4 * math.sqrt(0.95 * 0.05 / 2000))
    with pytest.raises(ValueError):
        score_test_band(0)


def test_coverage_counts_and_averages():
    p = np.array([0.3, 0.3])
    rate, band = coverage(p, [0.3, 0.9], [0.1, 0.1])
    assert rate == 0.5 and band == score_test_band(1)
    rate, _ = coverage(p, [0.9, 0.9], [np.inf, 0.0])
    assert rate == 0.5
    rate, band = coverage(np.tile(p, (4, 1)), np.tile([0.3, 0.9], (4, 1)), np.full((4, 2), 0.1))
    assert rate == 0.5 and band == score_test_band(4)
    with pytest.raises(ValueError):
        coverage(p, p, [-1.0, 0.1])


def test_runtime_summary():
    out = runtime_summary([{"estimator": "a", "wall_time": 1.0}, {"estimator": "a", "wall_time": 3.0},
                           {"estimator": "b", "wall_time": 2.0}])
    assert out["a"]["mean"] == 2.0 and out["a"]["sd"] == pytest.approx(math.sqrt(2))
    assert out["b"] == {"n": 1, "mean": 2.0, "sd": None}


def fake_rows(rng, n_rep=5):
    rows = []
    for r in range(n_rep):
        for step in (1, 2):
            for e in ("naive", "ba-exp"):
                failed = e == "ba-exp" and r == 0 and step == 1
                rows.append({
                    "replicate": r, "step": step, "t": float(step * 10), "estimator": e,
                    "n_clicks": 100, "n_converted": 10, "status": "nonconvergence" if failed else "ok",
                    "converged": int(not failed), "avg_bias": rng.normal(), "abs_bias": rng.random(),
                    "weighted_bias": rng.normal(), "nll": rng.random(),
                    "coverage": float("nan") if e == "naive" else rng.random(),
                    "mean_se_logit": 0.1, "iterations": 3,
                })
    return rows


def test_report_groups_and_counts(rng):
    rows = fake_rows(rng)
    rep = build_report(rows, estimator_order=["naive", "ba-exp"])
    assert [(r["step"], r["estimator"]) for r in rep] == [
        (1, "naive"), (1, "ba-exp"), (2, "naive"), (2, "ba-exp")]
    r = rep[1]
    assert r["n_fits"] == 5 and r["n_failed"] == 1 and r["failure_rate"] == 0.2
    ok = [x["avg_bias"] for x in rows if x["step"] == 1 and x["estimator"] == "ba-exp" and x["status"] == "ok"]
    assert r["avg_bias"] == pytest.approx(np.mean(ok), abs=1e-15)
    assert (r["coverage_band_low"], r["coverage_band_high"]) == score_test_band(4)
    assert math.isnan(rep[0]["coverage"])
    assert set(REPORT_COLUMNS) == set(r)
    with pytest.raises(ValueError):
        build_report([])


def same(a, b):
    return a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b))


@given(st.randoms(use_true_random=False))
def test_report_is_permutation_invariant(random):
    rows = fake_rows(np.random.default_rng(7))
    shuffled = rows[:]
    random.shuffle(shuffled)
    for a, b in zip(build_report(rows), build_report(shuffled)):
        assert all(same(a[k], b[k]) for k in a)


def test_table_round_trip_is_exact(tmp_path, rng):
    rows = fake_rows(rng, 2)
    path = tmp_path / "r.csv"
    write_table(path, rows, RESULT_COLUMNS)
    back = read_table(path)
    for a, b in zip(rows, back):
        assert all(same(a[k], b[k]) for k in RESULT_COLUMNS)
    text = format_summary(build_report(rows), runtime_summary(
        [{"estimator": "naive", "wall_time": 0.1}]))
    assert "ba-exp" in text and "wall time" in text
