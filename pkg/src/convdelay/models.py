"""scikit-learn compatible wrappers.

Design matrices passed to these estimators exclude the intercept; it is added
as column 0 when ``fit_intercept=True``.  Conversion estimators expose
``predict_proba`` with columns ``[P(no conversion), P(conversion)]``.
"""

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import estimators as est
from .core import ObservationSnapshot
from .delay import (
    APPROXIMATE,
    EXPONENTIAL,
    WEIBULL,
    DelayFitSet,
    fit_exponential_firth,
    fit_exponential_mle,
    fit_weibull_firth,
    fit_weibull_mle,
)
from .numerics import NewtonOptions


def _design(X, fit_intercept):
    X = check_array(X, accept_sparse="csr", dtype=np.float64)
    if not fit_intercept:
        return X
    ones = np.ones((X.shape[0], 1))
    if sp.issparse(X):
        return sp.hstack([sp.csr_matrix(ones), X], format="csr")
    return np.hstack([ones, X])


def _vector(v, n, name):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} has {v.shape[0]} entries, expected {n}")
    return v


def _split_coef(beta, fit_intercept):
    beta = np.asarray(beta, dtype=np.float64)
    if fit_intercept:
        return beta[1:].copy(), float(beta[0])
    return beta.copy(), 0.0


class _ConversionBase(ClassifierMixin, BaseEstimator):
    def _options(self):
        return NewtonOptions(max_iterations=self.max_iter, gradient_tolerance=self.tol)

    def _store(self, fit, X):
        self.fit_ = fit
        self.coef_, self.intercept_ = _split_coef(fit.beta_c, self.fit_intercept)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1] - int(self.fit_intercept)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "fit_")
        Xd = _design(X, self.fit_intercept)
        if Xd.shape[1] != self.fit_.beta_c.shape[0]:
            raise ValueError(
                f"X has {Xd.shape[1] - int(self.fit_intercept)} features, expected {self.n_features_in_}"
            )
        return np.asarray(Xd @ self.fit_.beta_c).reshape(-1)

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


class NaiveConversionEstimator(_ConversionBase):
    """Logistic regression on current conversion statuses."""

    def __init__(self, fit_intercept=True, max_iter=100, tol=1e-8):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        Xd = _design(X, self.fit_intercept)
        y = _vector(y, Xd.shape[0], "y")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("y must be binary 0/1")
        # statuses are taken as final: unit ages, converted rows at delay 0
        snap = ObservationSnapshot(np.nan, 1.0, Xd, np.ones_like(y), y, 1.0 - y)
        return self._store(est.fit_naive(snap, self._options()), Xd)


def _snapshot(Xd, y, age, delay, window):
    y = _vector(y, Xd.shape[0], "y")
    age = _vector(age, Xd.shape[0], "age")
    observed = None if delay is None else _vector(delay, Xd.shape[0], "delay")
    return ObservationSnapshot.from_arrays(Xd, y, age, observed, window=window)


class BiasAdjustedConversionEstimator(_ConversionBase):
    """Naive fit corrected by a fitted delay distribution.

    Parameters
    ----------
    delay : {"exponential", "weibull"}
    window : float, optional
        Conversion window in the units of ``age``; defaults to the largest age.
    delay_sample : {"approximate", "converted"}
        Rows used by the delay fit, see
        :func:`convdelay.estimators.fit_bias_adjusted`.
    compute_se : bool
        Store the sandwich covariance in ``covariance_``.
    """

    def __init__(self, delay=EXPONENTIAL, window=None, delay_sample=APPROXIMATE,
                 compute_se=True, fit_intercept=True, max_iter=100, tol=1e-8):
        self.delay = delay
        self.window = window
        self.delay_sample = delay_sample
        self.compute_se = compute_se
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, *, age, delay=None):
        """``y`` current statuses, ``age`` click ages, ``delay`` observed delays
        of converted rows (ignored elsewhere)."""
        if self.delay not in (EXPONENTIAL, WEIBULL):
            raise ValueError("delay must be 'exponential' or 'weibull'")
        Xd = _design(X, self.fit_intercept)
        snap = _snapshot(Xd, y, age, delay, self.window)
        fit = est.fit_bias_adjusted(snap, self.delay, self._options(),
                                    compute_se=self.compute_se, delay_sample=self.delay_sample)
        self.covariance_ = fit.covariance
        self.delay_model_ = fit.delay
        return self._store(fit, Xd)


class DFMConversionEstimator(_ConversionBase):
    """Joint logistic-exponential delayed-feedback likelihood."""

    def __init__(self, fit_intercept=True, max_iter=3000, tol=1e-7):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, *, age, delay=None):
        Xd = _design(X, self.fit_intercept)
        snap = _snapshot(Xd, y, age, delay, None)
        fit = est.fit_dfm(snap, self._options())
        self.delay_model_ = fit.delay
        return self._store(fit, Xd)


class _DelayBase(RegressorMixin, BaseEstimator):
    def _fit_set(self, X, delay, event, age):
        Xd = _design(X, self.fit_intercept)
        n = Xd.shape[0]
        event = np.ones(n) if event is None else _vector(event, n, "event")
        return Xd, DelayFitSet.from_arrays(Xd, _vector(delay, n, "delay"), event,
                                           None if age is None else _vector(age, n, "age"))

    def _finish(self, model, Xd):
        self.model_ = model
        self.coef_, self.intercept_ = _split_coef(model.coef, self.fit_intercept)
        self.n_features_in_ = Xd.shape[1] - int(self.fit_intercept)
        return self

    def predict(self, X):
        """Expected delay per row."""
        check_is_fitted(self, "model_")
        return self.model_.mean_delay(_design(X, self.fit_intercept))

    def predict_cdf(self, X, a):
        """``P(delay <= a)`` per row."""
        check_is_fitted(self, "model_")
        Xd = _design(X, self.fit_intercept)
        return self.model_.cdf(Xd, np.broadcast_to(np.asarray(a, float), (Xd.shape[0],)))


class ExponentialDelayRegressor(_DelayBase):
    """Censored exponential delay regression (log-rate linear in X).

    ``fit(X, delay, event=None, age=None)``: ``delay`` holds observed delays
    (censoring times where ``event == 0``); ``age`` is the per-row horizon
    used by the bias-reduction penalty and defaults to ``delay``.
    """

    def __init__(self, penalized=True, fit_intercept=True, max_iter=100, tol=1e-8):
        self.penalized = penalized
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, delay, event=None, age=None):
        Xd, fs = self._fit_set(X, delay, event, age)
        opts = NewtonOptions(max_iterations=self.max_iter, gradient_tolerance=self.tol)
        fitter = fit_exponential_firth if self.penalized else fit_exponential_mle
        return self._finish(fitter(fs, opts), Xd)


class WeibullDelayRegressor(_DelayBase):
    """Censored Weibull delay regression (log-scale linear in X, common shape).

    With ``penalized=True`` the shape comes from the joint MLE unless
    ``shape`` is given, and the scale coefficients from the penalised fit.
    """

    def __init__(self, penalized=True, shape=None, penalty_age="a", fit_intercept=True,
                 max_iter=100, tol=1e-8):
        self.penalized = penalized
        self.shape = shape
        self.penalty_age = penalty_age
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, delay, event=None, age=None):
        Xd, fs = self._fit_set(X, delay, event, age)
        opts = NewtonOptions(max_iterations=self.max_iter, gradient_tolerance=self.tol)
        if self.penalized:
            model = fit_weibull_firth(fs, opts, shape=self.shape, penalty_age=self.penalty_age)
        else:
            model = fit_weibull_mle(fs, opts)
        self.shape_ = model.shape
        return self._finish(model, Xd)
