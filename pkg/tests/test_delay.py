import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convdelay.core import FeatureVector, ObservationSnapshot
from convdelay.delay import (
    CONVERTED,
    EXPONENTIAL,
    WEIBULL,
    DelayFitSet,
    DelayModel,
    build_fit_set,
    exponential_cdf,
    exponential_firth_loglik,
    exponential_firth_penalty,
    exponential_loglik,
    fit_exponential_firth,
    fit_exponential_mle,
    fit_truncated,
    fit_weibull_firth,
    fit_weibull_mle,
    truncated_loglik,
    weibull_cdf,
    weibull_firth_loglik,
    weibull_loglik,
)
from convdelay.exceptions import EmptyFitSet, NonConvergence, NumericalError, ShapeOutOfRange
from convdelay.numerics import fd_gradient


def intercept(k=1):
    return FeatureVector((0,), (1.0,), k)


def censored_sample(rng, n, rate, ages=(0.0, 30.0), X=None, beta=None):
    X = np.ones((n, 1)) if X is None else X
    lam = rate if beta is None else np.exp(X @ beta)
    d = rng.exponential(1.0, n) / lam
    a = rng.uniform(*ages, n)
    event = (d < a).astype(float)
    return DelayFitSet.from_arrays(X, np.minimum(d, a), event, age=a)


def rel_err(g, g_fd):
    return np.max(np.abs(g - g_fd)) / max(np.max(np.abs(g_fd)), 1e-12)


def test_exponential_cdf_examples():
    m = DelayModel(EXPONENTIAL, [np.log(0.5)])
    assert exponential_cdf(m, intercept(), 0.0)[0] == 0.0
    assert exponential_cdf(m, intercept(), 2.0)[0] == pytest.approx(1 - np.exp(-1), abs=1e-12)
    vals = exponential_cdf(m, np.ones((5, 1)), np.array([1, 10, 100, 1000, 1e4]))
    assert np.all(np.diff(vals) >= 0) and vals[-1] == pytest.approx(1.0)


def test_weibull_cdf_examples(rng):
    for _ in range(10):
        g, a = np.exp(rng.normal()), rng.uniform(0, 5)
        w = DelayModel(WEIBULL, [np.log(g)], shape=1.0)
        e = DelayModel(EXPONENTIAL, [-np.log(g)])
        assert abs(weibull_cdf(w, intercept(), a)[0] - exponential_cdf(e, intercept(), a)[0]) < 1e-12
    for nu in (0.3, 1.0, 4.0):
        w = DelayModel(WEIBULL, [np.log(2.5)], shape=nu)
        assert weibull_cdf(w, intercept(), 2.5)[0] == pytest.approx(1 - np.exp(-1), abs=1e-14)
    w = DelayModel(WEIBULL, [0.0], shape=2.0)
    assert weibull_cdf(w, intercept(), 1.0)[0] == pytest.approx(1 - np.exp(-1), abs=1e-14)


def test_family_mismatch_and_model_validation():
    with pytest.raises(ValueError):
        exponential_cdf(DelayModel(WEIBULL, [0.0], 1.0), intercept(), 1.0)
    with pytest.raises(ValueError):
        DelayModel(WEIBULL, [0.0])
    with pytest.raises(ValueError):
        DelayModel(EXPONENTIAL, [0.0], 2.0)


@given(st.floats(-3, 3), st.floats(0.1, 5), st.lists(st.floats(0, 100), min_size=2, max_size=20))
def test_cdfs_monotone_from_zero(b, nu, ages):
    a = np.sort(np.array(ages))
    for m in (DelayModel(EXPONENTIAL, [b]), DelayModel(WEIBULL, [b], nu)):
        H = m.cdf(np.ones((a.size, 1)), a)
        assert np.all(np.diff(H) >= -1e-15)
        assert np.all((0 <= H) & (H <= 1))
        assert m.cdf(np.ones((1, 1)), np.zeros(1))[0] == 0.0


def snapshot(status, age, observed, window=30.0):
    n = len(status)
    return ObservationSnapshot(50.0, window, np.ones((n, 1)), age, status, observed)


def test_build_fit_set_rule():
    status = [1, 1, 1, 0, 0, 0, 0, 0, 0]
    age = [30, 10, 5, 3, 20, 30, 30, 30, 30]
    observed = [2, 1, 1, 3, 20, 30, 30, 30, 30]
    fs = build_fit_set(snapshot(status, age, observed))
    assert fs.n == 5 and fs.n_events == 3
    assert list(fs.rows) == [0, 1, 2, 3, 4]
    assert build_fit_set(snapshot(status, age, observed), CONVERTED).n == 3


def test_build_fit_set_empty():
    with pytest.raises(EmptyFitSet):
        build_fit_set(snapshot([0, 0], [30, 30], [30, 30]))


def test_exponential_mle_closed_forms(rng):
    z = rng.exponential(3.0, 50)
    fs = DelayFitSet.from_arrays(np.ones((50, 1)), z, np.ones(50))
    assert np.exp(fit_exponential_mle(fs).coef[0]) == pytest.approx(50 / z.sum(), rel=1e-10)
    fs = censored_sample(rng, 300, 0.2)
    lam = np.exp(fit_exponential_mle(fs).coef[0])
    assert lam == pytest.approx(fs.event.sum() / fs.observed.sum(), rel=1e-10)


def grid_argmax(f, lo, hi):
    grid = np.arange(lo, hi, 1e-2)
    best = grid[np.argmax([f(v) for v in grid])]
    fine = np.arange(best - 2e-2, best + 2e-2, 1e-4)
    return fine[np.argmax([f(v) for v in fine])]


def test_firth_uncensored_matches_grid(rng):
    z = rng.exponential(4.0, 40)
    fs = DelayFitSet.from_arrays(np.ones((40, 1)), z, np.ones(40), age=np.full(40, 30.0))
    b = grid_argmax(lambda v: exponential_firth_loglik(np.array([v]), fs)[0], -4, 2)
    assert abs(np.exp(b) - np.exp(fit_exponential_firth(fs).coef[0])) < 1e-3


def test_firth_intercept_solves_adjusted_score(rng):
    # intercept-only gradient equals Firth's adjusted score for the rate
    fs = censored_sample(rng, 200, 0.25)
    lam = np.exp(fit_exponential_firth(fs).coef[0])
    a = fs.age
    H, S = -np.expm1(-lam * a), np.exp(-lam * a)
    adjusted = fs.event.sum() - lam * fs.observed.sum() + np.sum(a * lam * S) / np.sum(H) - 1
    assert abs(adjusted) < 1e-8


def test_single_converted_row_is_finite_or_reported():
    fs = DelayFitSet.from_arrays(np.ones((1, 1)), [2.0], [1.0], age=[10.0])
    try:
        m = fit_exponential_firth(fs)
    except NumericalError:
        return
    assert np.all(np.isfinite(m.coef))


def test_penalty_is_the_exact_difference(rng):
    X = np.column_stack([np.ones(100), rng.normal(size=100)])
    fs = censored_sample(rng, 100, None, X=X, beta=np.array([-1.0, 0.3]))
    for _ in range(5):
        b = rng.normal(size=2) * 0.5
        diff = exponential_firth_loglik(b, fs)[0] - exponential_loglik(b, fs)[0]
        assert abs(diff - exponential_firth_penalty(b, fs)) < 1e-12 * max(1, abs(diff))


def test_low_censoring_firth_and_mle_agree(rng):
    fs = censored_sample(rng, 5000, 0.25, ages=(60.0, 90.0))
    lf = np.exp(fit_exponential_firth(fs).coef[0])
    lm = np.exp(fit_exponential_mle(fs).coef[0])
    assert abs(lf - lm) / lm < 0.02


@pytest.mark.parametrize("which", ["exp", "firth", "weib_a", "weib_z", "weib_ll", "trunc_e", "trunc_w"])
def test_gradients_match_finite_differences(rng, which):
    X = np.column_stack([np.ones(150), rng.normal(size=150), rng.random(150) < 0.4])
    fs = censored_sample(rng, 150, None, X=X, beta=np.array([-1.2, 0.3, -0.2]))
    conv = DelayFitSet.from_arrays(X[fs.event == 1], fs.observed[fs.event == 1],
                                   np.ones(int(fs.n_events)), age=fs.age[fs.event == 1])
    funcs = {
        "exp": (lambda b: exponential_loglik(b, fs), 3),
        "firth": (lambda b: exponential_firth_loglik(b, fs), 3),
        "weib_a": (lambda b: weibull_firth_loglik(b, 0.7, fs, "a"), 3),
        "weib_z": (lambda b: weibull_firth_loglik(b, 1.4, fs, "z"), 3),
        "weib_ll": (lambda b: weibull_loglik(b, fs), 4),
        "trunc_e": (lambda b: truncated_loglik(b, conv, EXPONENTIAL), 3),
        "trunc_w": (lambda b: truncated_loglik(b, conv, WEIBULL), 4),
    }
    f, k = funcs[which]
    for _ in range(10):
        b = rng.normal(size=k) * 0.3
        b[0] += 1.0 if which.startswith("weib") or which == "trunc_w" else -1.0
        g = f(b)[1]
        assert rel_err(g, fd_gradient(f, b, h=1e-6)) < 1e-5


def test_weibull_nests_exponential(rng):
    fs = censored_sample(rng, 1000, 0.25)
    w = fit_weibull_firth(fs)
    e = fit_exponential_firth(fs)
    probes = np.linspace(0.5, 30, 10)
    np.testing.assert_allclose(w.cdf(np.ones((10, 1)), probes), e.cdf(np.ones((10, 1)), probes),
                               atol=0.05)


def test_weibull_fixed_shape_matches_grid(rng):
    d = rng.weibull(0.6, 200) * 3.0
    a = rng.uniform(0, 30, 200)
    fs = DelayFitSet.from_arrays(np.ones((200, 1)), np.minimum(d, a), (d < a).astype(float), age=a)
    b = grid_argmax(lambda v: weibull_firth_loglik(np.array([v]), 0.6, fs)[0], -3, 4)
    fitted = fit_weibull_firth(fs, shape=0.6).coef[0]
    assert abs(b - fitted) < 1e-3


def test_weibull_mle_recovers_shape(rng):
    d = rng.weibull(0.5, 3000) * 4.0
    a = rng.uniform(0, 30, 3000)
    fs = DelayFitSet.from_arrays(np.ones((3000, 1)), np.minimum(d, a), (d < a).astype(float), age=a)
    m = fit_weibull_mle(fs)
    assert abs(m.shape - 0.5) < 0.05
    assert abs(m.coef[0] - np.log(4.0)) < 0.2


def test_weibull_all_censored_is_an_error():
    fs = DelayFitSet.from_arrays(np.ones((20, 1)), np.full(20, 5.0), np.zeros(20), age=np.full(20, 5.0))
    with pytest.raises((NonConvergence, ShapeOutOfRange)) as info:
        fit_weibull_firth(fs)
    assert info.value.stage is not None


def test_truncated_fit_recovers_rate(rng):
    n = 20000
    d = rng.exponential(4.0, n)
    a = rng.uniform(0, 30, n)
    seen = d < a
    fs = DelayFitSet.from_arrays(np.ones((seen.sum(), 1)), d[seen], np.ones(seen.sum()), age=a[seen])
    assert abs(np.exp(fit_truncated(fs).coef[0]) - 0.25) < 0.01
    # the untruncated estimate from the same rows is visibly too fast
    assert fs.n / fs.observed.sum() > 0.27
    with pytest.raises(ValueError):
        fit_truncated(censored_sample(rng, 50, 0.25))
