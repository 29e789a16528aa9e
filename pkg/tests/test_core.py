import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from convdelay.core import (
    ClickData,
    ClickRecord,
    FeatureVector,
    ObservationSnapshot,
    conversion_probability,
    logistic,
    predict_probability,
    snapshot_at,
)

from .conftest import make_dataset


def one_click(t0, conv, k=2):
    fv = FeatureVector((0,), (1.0,), k)
    return [ClickRecord(t0, fv, conv)]


def test_converted_click_visible():
    s = snapshot_at(one_click(10.0, 12.0), 15.0, 30.0)
    assert (s.age[0], s.status[0], s.observed[0]) == (5.0, 1.0, 2.0)


def test_unconverted_click_censored_at_age():
    s = snapshot_at(one_click(10.0, None), 15.0, 30.0)
    assert (s.age[0], s.status[0], s.observed[0]) == (5.0, 0.0, 5.0)


def test_conversion_beyond_window_counts_as_unconverted():
    s = snapshot_at(one_click(10.0, 45.0), 60.0, 30.0)
    assert (s.age[0], s.status[0], s.observed[0]) == (30.0, 0.0, 30.0)


def test_conversion_at_analysis_time_not_yet_seen():
    s = snapshot_at(one_click(10.0, 15.0), 15.0, 30.0)
    assert s.status[0] == 0.0 and s.observed[0] == s.age[0]


def test_only_clicks_up_to_t_are_included():
    fv = FeatureVector((0,), (1.0,), 1)
    recs = [ClickRecord(1.0, fv), ClickRecord(5.0, fv), ClickRecord(9.0, fv)]
    s = snapshot_at(recs, 5.0, 30.0)
    assert s.n == 2 and list(s.rows) == [0, 1]


@pytest.mark.parametrize("t,w", [(-1.0, 30.0), (0.0, 30.0), (5.0, -2.0), (5.0, 0.0)])
def test_snapshot_rejects_bad_times(t, w):
    with pytest.raises(ValueError):
        snapshot_at(one_click(1.0, None), t, w)


def test_click_record_invariants():
    fv = FeatureVector((0,), (1.0,), 1)
    with pytest.raises(ValueError):
        ClickRecord(5.0, fv, 5.0)
    with pytest.raises(ValueError):
        ClickRecord(-1.0, fv)
    r = ClickRecord(2.0, fv, 3.5)
    assert r.converted and r.delay == 1.5


@pytest.mark.parametrize("kw", [
    dict(indices=(1,), values=(1.0,), dimension=3),
    dict(indices=(0,), values=(2.0,), dimension=3),
    dict(indices=(0, 2, 1), values=(1.0, 1.0, 1.0), dimension=3),
    dict(indices=(0, 3), values=(1.0, 1.0), dimension=3),
    dict(indices=(0, 1), values=(1.0, np.inf), dimension=3),
])
def test_feature_vector_invariants(kw):
    with pytest.raises(ValueError):
        FeatureVector(**kw)


def test_logistic_examples():
    assert logistic(0.0) == 0.5
    v = logistic(40.0)
    assert v < 1.0 or v == 1.0
    assert v > 1 - 1e-12
    eta = np.linspace(-50, 50, 101)
    np.testing.assert_allclose(logistic(eta) + logistic(-eta), 1.0, atol=1e-15)
    assert np.all(np.isfinite(logistic(np.array([-1e308, 1e308]))))


def test_conversion_probability_examples():
    x = FeatureVector((0,), (1.0,), 3)
    assert conversion_probability(np.zeros(3), FeatureVector((0, 2), (1.0, 4.0), 3)) == 0.5
    assert conversion_probability(np.array([np.log(3), 0, 0]), x) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValueError):
        conversion_probability(np.zeros(2), x)


def test_conversion_probability_matches_dense(rng):
    for _ in range(10):
        x = np.concatenate([[1.0], rng.normal(size=5) * (rng.random(5) < 0.5)])
        b = rng.normal(size=6)
        fv = FeatureVector.from_dense(x)
        dense = 1.0 / (1.0 + np.exp(-(x @ b)))
        assert abs(conversion_probability(b, fv) - dense) < 1e-12


def test_click_data_round_trip_through_records(rng):
    data, _ = make_dataset(rng, n=50)
    back = ClickData.from_records(list(data.records()))
    np.testing.assert_array_equal(back.click_time, data.click_time)
    np.testing.assert_array_equal(np.isnan(back.conversion_time), np.isnan(data.conversion_time))
    np.testing.assert_allclose(back.X.toarray(), data.X)


def test_sparse_and_dense_snapshots_agree(rng):
    data, _ = make_dataset(rng, n=80)
    sparse = ClickData(data.click_time, data.conversion_time, sp.csr_matrix(data.X))
    a, b = snapshot_at(data, 33.0, 30.0), snapshot_at(sparse, 33.0, 30.0)
    np.testing.assert_array_equal(a.status, b.status)
    np.testing.assert_array_equal(a.observed, b.observed)
    beta = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(predict_probability(beta, a.X), predict_probability(beta, b.X))


def test_snapshot_validation():
    X = np.ones((2, 1))
    with pytest.raises(ValueError):
        ObservationSnapshot(1.0, 30.0, X, [5.0, 5.0], [1.0, 0.0], [5.0, 5.0])
    with pytest.raises(ValueError):
        ObservationSnapshot(1.0, 30.0, X, [5.0, 5.0], [0.0, 0.0], [1.0, 5.0])
    with pytest.raises(ValueError):
        ObservationSnapshot(1.0, 30.0, X, [31.0, 5.0], [0.0, 0.0], [31.0, 5.0])


clicks = st.lists(
    st.tuples(
        st.floats(0, 100, allow_nan=False),
        st.one_of(st.none(), st.floats(1e-3, 60, allow_nan=False)),
    ),
    min_size=1, max_size=40,
)


@given(clicks, st.floats(0.5, 200), st.floats(1.0, 40.0))
def test_snapshot_status_equivalence(rows, t, window):
    t0 = np.array([r[0] for r in rows])
    conv = np.array([np.nan if r[1] is None else r[0] + r[1] for r in rows])
    data = ClickData(t0, conv, np.ones((len(rows), 1)))
    if not np.any(t0 <= t):
        return
    s = snapshot_at(data, t, window)
    assert np.all((s.status == 1) == (s.observed < s.age))
    assert np.all((s.status == 0) == (s.observed == s.age))
    assert np.all((0 <= s.observed) & (s.observed <= s.age) & (s.age <= window))


@given(clicks, st.floats(0.5, 100), st.floats(0.0, 100), st.floats(1.0, 40.0))
def test_converted_clicks_stay_converted(rows, t, dt, window):
    t0 = np.array([r[0] for r in rows])
    conv = np.array([np.nan if r[1] is None else r[0] + r[1] for r in rows])
    data = ClickData(t0, conv, np.ones((len(rows), 1)))
    if not np.any(t0 <= t):
        return
    early, late = snapshot_at(data, t, window), snapshot_at(data, t + dt, window)
    late_status = dict(zip(late.rows, late.status))
    assert all(late_status[r] == 1 for r, y in zip(early.rows, early.status) if y == 1)
