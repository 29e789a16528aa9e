"""Conversion-probability estimators.

``fit_naive``
    Logistic MLE on current statuses (biased low while clicks are censored).
``fit_oracle``
    Logistic MLE on eventual statuses; a gold standard for simulations.
``fit_bias_adjusted``
    Three steps: naive fit, delay-distribution fit, then the root of
    ``sum_i x_i (H_i(a_i) p_i(b) - theta_i) = 0`` where ``theta_i`` are the
    naive fitted probabilities and ``H_i`` the fitted delay cdf.
``fit_dfm``
    Joint maximum likelihood of the logistic-exponential mixture.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, eigh
from scipy.special import expit, log_expit, ndtri

from ._validation import check_coef, check_design, linear_predictor, row_quadratic, weighted_gram, xt_dot
from .core import as_click_data, logistic
from .delay import (
    APPROXIMATE,
    CONVERTED,
    EXPONENTIAL,
    WEIBULL,
    DelayModel,
    build_fit_set,
    fit_exponential_firth,
    fit_exponential_mle,
    fit_truncated,
    fit_weibull_firth,
)
from .exceptions import (
    EmptyFitSet,
    InfeasibleAdjustment,
    NonConvergence,
    NumericalError,
    SeparationDetected,
    SingularJacobian,
)
from .numerics import NewtonOptions, minimize, solve_weighted_logistic_score

NAIVE = "naive"
ORACLE = "oracle"
BA_EXPONENTIAL = "ba-exp"
BA_WEIBULL = "ba-weibull"
BA_TRUE = "ba-true"
DFM = "dfm"
ESTIMATOR_KINDS = (NAIVE, ORACLE, BA_EXPONENTIAL, BA_WEIBULL, BA_TRUE, DFM)

MIN_WEIGHT = 1e-12
DFM_OPTIONS = NewtonOptions(max_iterations=3000, gradient_tolerance=1e-7)


@dataclass
class ConversionFit:
    """Fitted conversion coefficients plus optional covariance and delay model."""

    beta_c: np.ndarray
    kind: str
    covariance: Optional[np.ndarray] = None
    delay: Optional[DelayModel] = None
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True
    n_dropped: int = 0

    def predict_proba(self, X):
        X = check_design(X)
        return logistic(linear_predictor(X, check_coef(self.beta_c, X.shape[1])))

    def logit_se(self, X):
        """Standard error of ``x' b`` for each row, from the covariance."""
        if self.covariance is None:
            raise ValueError(f"{self.kind} fit carries no covariance")
        X = check_design(X)
        return np.sqrt(np.maximum(row_quadratic(X, self.covariance), 0.0))

    def confidence_interval(self, X, level=0.95, scale="logit"):
        """Wald interval for each row's probability.

        ``scale="logit"`` builds the interval for ``x' b`` and maps it through
        the logistic (stays inside (0, 1)); ``scale="probability"`` uses the
        delta method on the probability scale, clipped to [0, 1].
        """
        X = check_design(X)
        zq = ndtri(0.5 + level / 2.0)
        eta = linear_predictor(X, self.beta_c)
        se = self.logit_se(X)
        if scale == "logit":
            return expit(eta - zq * se), expit(eta + zq * se)
        if scale == "probability":
            p = expit(eta)
            half = zq * p * (1.0 - p) * se
            return np.clip(p - half, 0.0, 1.0), np.clip(p + half, 0.0, 1.0)
        raise ValueError("scale must be 'logit' or 'probability'")


def _logistic_fit(X, labels, kind, opts):
    res = solve_weighted_logistic_score(X, labels, None, None, opts)
    return ConversionFit(res.argmin, kind, diagnostics={"logistic": res.summary()})


def fit_naive(snapshot, opts=None):
    """Logistic MLE treating current statuses as final labels."""
    if snapshot.n == 0:
        raise ValueError("snapshot is empty")
    return _logistic_fit(snapshot.X, snapshot.status, NAIVE, opts)


def fit_oracle(dataset, window, opts=None, *, rows=None):
    """Logistic MLE on eventual statuses (conversion with delay < window).

    ``rows`` restricts the fit to a subset, e.g. the clicks of a snapshot.
    """
    data = as_click_data(dataset)
    if rows is not None:
        data = data.subset(rows)
    if data.n == 0:
        raise ValueError("dataset is empty")
    return _logistic_fit(data.X, data.eventual_status(window), ORACLE, opts)


def _fit_delay(snapshot, delay, opts, weibull_penalty_age, sample):
    if isinstance(delay, DelayModel):
        return delay, BA_TRUE, None
    if delay not in (EXPONENTIAL, WEIBULL):
        raise ValueError(f"unknown delay source {delay!r}")
    fs = build_fit_set(snapshot, sample)
    kind = BA_EXPONENTIAL if delay == EXPONENTIAL else BA_WEIBULL
    if sample == CONVERTED:
        model, res = fit_truncated(fs, delay, opts, return_result=True)
        return model, kind, res
    if delay == EXPONENTIAL:
        model, res = fit_exponential_firth(fs, opts, return_result=True)
        return model, BA_EXPONENTIAL, res
    if delay == WEIBULL:
        model, res = fit_weibull_firth(
            fs, opts, penalty_age=weibull_penalty_age, return_result=True
        )
        return model, BA_WEIBULL, res
    raise ValueError(f"unknown delay source {delay!r}")


def fit_bias_adjusted(
    snapshot,
    delay=EXPONENTIAL,
    opts=None,
    *,
    compute_se=True,
    weibull_penalty_age="a",
    delay_sample=APPROXIMATE,
):
    """Bias-adjusted conversion estimate.

    Parameters
    ----------
    snapshot : ObservationSnapshot
    delay : {"exponential", "weibull"} or DelayModel
        Delay family to fit with the penalised estimator, or a known model
        (the true-delay variant used in simulations).
    compute_se : bool
        Attach the sandwich covariance from :func:`standard_errors`.
    delay_sample : {"approximate", "converted"}
        Rows for the delay fit.  ``"approximate"`` uses converted clicks plus
        unconverted clicks younger than the window with the penalised
        censored fits.  Clicks that will never convert sit in that sample as
        censored delays, which drags the fitted rate down; ``"converted"``
        avoids this by fitting converted delays only, each truncated at its
        click age (plain maximum likelihood, see
        :func:`convdelay.delay.fit_truncated`).

    Errors from each step are re-raised with ``stage`` set to ``"step1"``,
    ``"step2"`` or ``"step3"``.  Rows with fitted ``H_i(a_i) < 1e-12``
    (typically clicks of age zero) are left out of step 3.
    """
    if snapshot.n == 0:
        raise ValueError("snapshot is empty")
    opts = opts or NewtonOptions()
    try:
        naive = fit_naive(snapshot, opts)
    except NumericalError as exc:
        raise exc.with_stage("step1")
    theta = naive.predict_proba(snapshot.X)

    try:
        model, kind, dres = _fit_delay(
            snapshot, delay, opts, weibull_penalty_age, delay_sample
        )
    except (NumericalError, EmptyFitSet) as exc:
        raise exc.with_stage("step2")

    H = model.cdf(snapshot.X, snapshot.age)
    keep = H >= MIN_WEIGHT
    n_dropped = int(snapshot.n - keep.sum())
    try:
        res = solve_weighted_logistic_score(
            snapshot.X[keep], theta[keep], H[keep], naive.beta_c, opts
        )
    except SeparationDetected as exc:
        raise InfeasibleAdjustment(
            f"adjustment equations have no finite root: {exc}", stage="step3", result=exc.result
        ) from None
    except NumericalError as exc:
        raise exc.with_stage("step3")

    diagnostics = {"step1": naive.diagnostics["logistic"], "step3": res.summary()}
    if dres is not None:
        diagnostics["step2"] = dres.summary()
    fit = ConversionFit(res.argmin, kind, None, model, diagnostics, True, n_dropped)
    if compute_se:
        fit.covariance = standard_errors(fit, snapshot, model)
    return fit


def standard_errors(fit, snapshot, delay=None, *, rcond=1e-10):
    """Sandwich covariance ``A^+ B A^+`` of bias-adjusted coefficients.

    ``A = sum_i H_i p_i (1 - p_i) x_i x_i'`` is the Jacobian of the adjustment
    equations and ``B = sum_i e_i^2 x_i x_i'`` with ``e_i = y_i - p_i H_i``.
    Uncertainty in the plugged-in delay model is ignored.

    ``A^+`` is the inverse restricted to eigenvalues above ``rcond`` times the
    largest.  For a full-rank design this is the ordinary inverse; with
    collinear columns (one-hot blocks next to an intercept) the coefficients
    themselves are not identified, but variances of ``x' b`` for rows in the
    design's row space remain valid.
    """
    delay = delay if delay is not None else fit.delay
    if delay is None:
        raise ValueError("a delay model is required")
    X = snapshot.X
    H = delay.cdf(X, snapshot.age)
    H = np.where(H >= MIN_WEIGHT, H, 0.0)
    p = expit(linear_predictor(X, fit.beta_c))
    A = weighted_gram(X, H * p * (1.0 - p))
    e = snapshot.status - p * H
    B = weighted_gram(X, e * e)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise SingularJacobian("non-finite adjustment Jacobian")
    try:
        w, V = eigh(A)
    except LinAlgError as exc:
        raise SingularJacobian(f"eigendecomposition failed: {exc}") from None
    top = float(w[-1]) if w.size else 0.0
    if not top > 0:
        raise SingularJacobian("adjustment Jacobian is zero")
    keep = w > rcond * top
    Vk = V[:, keep] / w[keep]
    Ainv = Vk @ V[:, keep].T
    cov = Ainv @ B @ Ainv
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)):
        raise SingularJacobian("non-finite covariance")
    return cov


def dfm_nll(beta_c, beta_d, snapshot):
    """Negative log-likelihood of the delayed-feedback model and its gradient.

    Converted rows contribute ``-[log p + log lambda - lambda z]``; unconverted
    rows contribute ``-log(1 - p + p exp(-lambda a))``.  Returns
    ``(value, gradient)`` with the gradient stacked as ``[d/d beta_c, d/d beta_d]``.
    """
    X = snapshot.X
    k = X.shape[1]
    eta_c = linear_predictor(X, check_coef(beta_c, k, name="beta_c"))
    eta_d = linear_predictor(X, check_coef(beta_d, k, name="beta_d"))
    y = snapshot.status
    z = snapshot.observed
    with np.errstate(over="ignore", invalid="ignore"):
        lam = np.exp(eta_d)
        lz = lam * z
        # log(1 - p + p e^{-u}) = log_expit(-eta) + log1p(e^{eta - u})
        shifted = eta_c - lz
        conv = y == 1
        value = -np.sum(log_expit(eta_c[conv]) + eta_d[conv] - lz[conv])
        value += np.sum(np.logaddexp(0.0, eta_c[~conv]) - np.logaddexp(0.0, shifted[~conv]))
        p = expit(eta_c)
        q = expit(shifted)
        g_c = np.where(conv, p - 1.0, p - q)
        g_d = np.where(conv, lz - 1.0, q * lz)
    return float(value), np.concatenate([xt_dot(X, g_c), xt_dot(X, g_d)])


def fit_dfm(snapshot, opts=None, *, start=None):
    """Maximise the delayed-feedback likelihood over both coefficient blocks.

    Starts from the naive logistic fit and the censored exponential MLE unless
    ``start = (beta_c, beta_d)`` is given.  The mean (per-click) NLL is
    minimised, so ``opts.gradient_tolerance`` is on that scale.  A failure
    raises with the best iterate in ``exc.result``.
    """
    if snapshot.n == 0:
        raise ValueError("snapshot is empty")
    if snapshot.n_converted == 0:
        # p -> 0 or lambda -> 0 both drive the likelihood to its supremum
        raise NonConvergence("no converted clicks: the delayed-feedback likelihood has no maximum")
    opts = opts or DFM_OPTIONS
    k = snapshot.k
    if start is None:
        try:
            bc = fit_naive(snapshot).beta_c
        except NumericalError:
            bc = np.zeros(k)
        try:
            bd = fit_exponential_mle(build_fit_set(snapshot)).coef
        except Exception:
            bd = np.zeros(k)
            mean_z = snapshot.observed[snapshot.status == 1].mean() if snapshot.n_converted else 1.0
            bd[0] = -np.log(max(mean_z, 1e-6))
        x0 = np.concatenate([bc, bd])
    else:
        x0 = np.concatenate([np.asarray(start[0], float), np.asarray(start[1], float)])
    n = float(snapshot.n)

    def fun(theta):
        v, g = dfm_nll(theta[:k], theta[k:], snapshot)
        return v / n, g / n

    t0 = time.perf_counter()
    res = minimize(fun, x0, opts, max_abs=100.0)
    res.wall_time = time.perf_counter() - t0
    model = DelayModel(EXPONENTIAL, res.argmin[k:])
    return ConversionFit(res.argmin[:k], DFM, None, model, {"lbfgs": res.summary()})
