import json
import math

import numpy as np
import pytest

from convdelay.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, build_parser, main
from convdelay.core import snapshot_at
from convdelay.estimators import fit_bias_adjusted
from convdelay.evaluation import read_table
from convdelay.ingest import CriteoRow, encode, fit_vocabulary, parse_criteo
from convdelay.simulation import synthetic_criteo_rows, write_criteo

SMALL = """\
design:
  n_clicks: 600
  n_time_steps: 4
study:
  replicates: 4
  estimators: [naive, ba-exp, ba-true]
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "study.yaml"
    p.write_text(SMALL)
    return p


@pytest.fixture
def criteo(tmp_path):
    p = tmp_path / "clicks.tsv"
    write_criteo(p, synthetic_criteo_rows(1500, seed=11))
    return p


def simulate(config, out, *extra):
    return main(["simulate", "--config", str(config), "--out", str(out), *extra])


def test_simulate_is_byte_identical_across_workers(tmp_path, config):
    assert simulate(config, tmp_path / "a", "--workers", "1") == EXIT_OK
    assert simulate(config, tmp_path / "b", "--workers", "2") == EXIT_OK
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(read_table(tmp_path / "a" / "results.csv")) == 4 * 4 * 3
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config"]["n_clicks"] == 600 and man["replicate_range"] == [0, 4]
    assert str(config) in man["inputs"]
    for name in ("timings.csv", "report.csv", "summary.txt"):
        assert (tmp_path / "a" / name).is_file()


def test_split_runs_merge_to_the_full_report(tmp_path, config):
    simulate(config, tmp_path / "all", "--workers", "1")
    simulate(config, tmp_path / "p1", "--workers", "1", "--replicate-range", "0:1")
    simulate(config, tmp_path / "p2", "--workers", "1", "--replicate-range", "1:4")
    assert main(["evaluate", str(tmp_path / "p1"), str(tmp_path / "p2"),
                 "--out", str(tmp_path / "merged")]) == EXIT_OK
    full = read_table(tmp_path / "all" / "report.csv")
    merged = read_table(tmp_path / "merged" / "report.csv")
    assert len(full) == len(merged)
    for a, b in zip(full, merged):
        for k in a:
            if k.startswith("wall_time"):
                continue
            assert a[k] == b[k] or (math.isnan(a[k]) and math.isnan(b[k])), k
    # overlapping ranges are refused
    assert main(["evaluate", str(tmp_path / "all"), str(tmp_path / "p1"),
                 "--out", str(tmp_path / "dup")]) == EXIT_DATA


def test_exit_codes(tmp_path, config):
    bad = tmp_path / "bad.yaml"
    bad.write_text("design:\n  n_clicks: -3\n")
    assert simulate(bad, tmp_path / "x") == EXIT_CONFIG
    bad.write_text("design: [unclosed\n")
    assert simulate(bad, tmp_path / "x") == EXIT_CONFIG
    assert simulate(config, tmp_path / "x", "--replicate-range", "3:1") == EXIT_CONFIG
    assert main(["evaluate", "--out", str(tmp_path / "e")]) == EXIT_DATA
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "results.csv").write_text(
        "replicate,step,t,estimator,status\n")
    assert main(["evaluate", str(tmp_path / "empty"), "--out", str(tmp_path / "e")]) == EXIT_DATA
    assert main(["fit", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "f")]) == EXIT_DATA


def test_fit_failure_exits_numerical(tmp_path):
    rows = [CriteoRow(r.click_timestamp, None, r.integer_features, r.categorical_features)
            for r in synthetic_criteo_rows(200, seed=1)]
    data = tmp_path / "noconv.tsv"
    write_criteo(data, rows)
    for e in ("dfm", "ba-exp"):
        out = tmp_path / e
        code = main(["fit", "--data", str(data), "--estimator", e, "--min-count", "5",
                     "--out", str(out)])
        assert code == EXIT_NUMERICAL
        man = json.loads((out / "manifest.json").read_text())
        assert man["converged"] is False and man["outputs"] == []


def test_fit_matches_manual_pipeline(tmp_path, criteo):
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(criteo), "--estimator", "ba-exp", "--min-count", "20",
                 "--t", "45", "--out", str(out)]) == EXIT_OK
    rows, _ = parse_criteo(criteo)
    vocab = fit_vocabulary(rows, min_count=20)
    snap = snapshot_at(encode(rows, vocab), 45.0, 30.0)
    fit = fit_bias_adjusted(snap, "exponential")
    coef = read_table(out / "coefficients.csv")
    np.testing.assert_array_equal([r["coefficient"] for r in coef], fit.beta_c)
    assert [r["name"] for r in coef] == vocab.feature_names
    pred = read_table(out / "predictions.csv")
    assert len(pred) == snap.n
    np.testing.assert_allclose([r["probability"] for r in pred], fit.predict_proba(snap.X), rtol=1e-15)
    assert all(r["ci_low"] <= r["probability"] <= r["ci_high"] for r in pred)


def test_fit_reads_dataset_format(tmp_path, criteo):
    from convdelay.ingest import write_dataset

    rows, _ = parse_criteo(criteo)
    vocab = fit_vocabulary(rows, min_count=20)
    write_dataset(tmp_path / "d.txt", encode(rows, vocab), vocab.feature_names)
    assert main(["fit", "--data", str(tmp_path / "d.txt"), "--format", "dataset",
                 "--estimator", "naive", "--out", str(tmp_path / "o")]) == EXIT_OK
    assert read_table(tmp_path / "o" / "coefficients.csv")[0]["se"] is None


def test_split_driver(tmp_path, criteo):
    out = tmp_path / "splits"
    assert build_parser().parse_args(["split", "--data", "x", "--out", "y"]).repeats == 40
    code = main(["split", "--data", str(criteo), "--fraction", "0.5", "--repeats", "3",
                 "--min-count", "20", "--estimators", "naive,ba-exp", "--out", str(out)])
    assert code == EXIT_OK
    splits = read_table(out / "splits.csv")
    assert [(r["split"], r["estimator"]) for r in splits] == [
        (float(i), e) for i in range(3) for e in ("naive", "ba-exp")]
    assert all(r["n_train"] + r["n_test"] == 1500 for r in splits)
    summary = {r["estimator"]: r for r in read_table(out / "split_summary.csv")}
    assert summary["ba-exp"]["n_ok"] == 3 and summary["ba-exp"]["mean_nll"] > 0
    code = main(["split", "--data", str(criteo), "--fraction", "0.5", "--repeats", "3",
                 "--min-count", "20", "--estimators", "oracle,ba-exp", "--delay-sample",
                 "converted", "--out", str(out)])
    summary = {r["estimator"]: r for r in read_table(out / "split_summary.csv")}
    assert code == EXIT_OK
    assert abs(summary["ba-exp"]["mean_nll"] - summary["oracle"]["mean_nll"]) < 0.02
