"""Censored conversion-delay models.

Delays of clicks that (will) convert follow an exponential law with rate
``exp(x' b)`` or a Weibull law with scale ``exp(x' b)`` and a shape shared by
all clicks.  Fitting uses the clicks that may still convert: every converted
click plus every unconverted click younger than the window.

Bias reduction
--------------
The penalised fits maximise

    loglik(b) + log det( sum_i H_i(b_i) / lambda_i * x_i x_i' )

where ``H_i`` is the delay cdf, ``b_i`` the click age and ``lambda_i`` the
rate.  With an intercept only, the gradient of this objective is exactly
Firth's adjusted score for the rate of a fixed-time censored exponential
sample, which removes the O(1/n) bias of the rate estimate.  The Weibull fit
with known shape applies the same penalty on the ``z ** shape`` time scale,
where Weibull delays are exponential.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import gamma as gamma_fn

from ._validation import (
    check_coef,
    check_design,
    independent_columns,
    linear_predictor,
    row_quadratic,
    weighted_gram,
    xt_dot,
)
from .core import FeatureVector
from .exceptions import EmptyFitSet, NonConvergence, NumericalError, ShapeOutOfRange
from .numerics import NewtonOptions, OptimizationResult, minimize, ridge_solve

EXPONENTIAL = "exponential"
WEIBULL = "weibull"
SHAPE_RANGE = (0.05, 20.0)
_COEF_LIMIT = 50.0
_TINY_DELAY = 1e-10


@dataclass(frozen=True)
class DelayModel:
    """Exponential (rate ``exp(x'b)``) or Weibull (scale ``exp(x'b)``) delays."""

    family: str
    coef: np.ndarray
    shape: Optional[float] = None

    def __post_init__(self):
        if self.family not in (EXPONENTIAL, WEIBULL):
            raise ValueError(f"unknown delay family {self.family!r}")
        coef = np.array(self.coef, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(coef)):
            raise ValueError("delay coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)
        if self.family == WEIBULL:
            if self.shape is None or not self.shape > 0:
                raise ValueError("Weibull delay model needs a positive shape")
            object.__setattr__(self, "shape", float(self.shape))
        elif self.shape is not None:
            raise ValueError("exponential delay model carries no shape")

    def _eta(self, X):
        if isinstance(X, FeatureVector):
            return np.array([X.dot(self.coef)])
        X = check_design(X)
        return linear_predictor(X, check_coef(self.coef, X.shape[1]))

    def cdf(self, X, a):
        """``H(a | x)`` for each row of ``X`` (or a single FeatureVector)."""
        eta = self._eta(X)
        a = np.asarray(a, dtype=np.float64)
        if np.any(a < 0):
            raise ValueError("ages must be non-negative")
        if self.family == EXPONENTIAL:
            return -np.expm1(-a * np.exp(eta))
        return -np.expm1(-np.power(a * np.exp(-eta), self.shape))

    def mean_delay(self, X):
        eta = self._eta(X)
        if self.family == EXPONENTIAL:
            return np.exp(-eta)
        return np.exp(eta) * gamma_fn(1.0 + 1.0 / self.shape)


def exponential_cdf(model, x, a):
    if model.family != EXPONENTIAL:
        raise ValueError("model is not exponential")
    return model.cdf(x, a)


def weibull_cdf(model, x, a):
    if model.family != WEIBULL:
        raise ValueError("model is not Weibull")
    return model.cdf(x, a)


@dataclass(frozen=True)
class DelayFitSet:
    """Rows used for delay estimation; ``event`` marks converted rows."""

    X: object
    observed: np.ndarray
    age: np.ndarray
    event: np.ndarray
    rows: np.ndarray

    @property
    def n(self):
        return self.observed.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def n_events(self):
        return int(self.event.sum())

    @classmethod
    def from_arrays(cls, X, observed, event, age=None):
        X = check_design(X)
        z = np.asarray(observed, dtype=np.float64).reshape(-1)
        d = np.asarray(event, dtype=np.float64).reshape(-1)
        a = z.copy() if age is None else np.asarray(age, dtype=np.float64).reshape(-1)
        if not (z.shape[0] == d.shape[0] == a.shape[0] == X.shape[0]):
            raise ValueError("fit-set arrays disagree in length")
        if z.shape[0] == 0:
            raise EmptyFitSet("no rows in delay fit set")
        if np.any(z < 0) or np.any(z > a) or not np.all((d == 0) | (d == 1)):
            raise ValueError("invalid fit-set arrays")
        return cls(X, z, a, d, np.arange(z.shape[0]))


APPROXIMATE = "approximate"
CONVERTED = "converted"
SAMPLES = (APPROXIMATE, CONVERTED)


def build_fit_set(snapshot, sample=APPROXIMATE):
    """Select the rows used to fit the delay law.

    ``sample="approximate"`` keeps converted rows plus unconverted rows
    younger than the window (censored at their age).  ``"converted"`` keeps
    converted rows only; they are meant for the truncated fits, which
    condition each delay on having been seen by the click's age.
    """
    if sample == APPROXIMATE:
        keep = (snapshot.status == 1) | (snapshot.age < snapshot.window)
    elif sample == CONVERTED:
        keep = snapshot.status == 1
    else:
        raise ValueError(f"sample must be one of {SAMPLES}, got {sample!r}")
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise EmptyFitSet(f"no rows for the {sample!r} delay sample")
    return DelayFitSet(
        snapshot.X[rows],
        np.asarray(snapshot.observed[rows]),
        np.asarray(snapshot.age[rows]),
        np.asarray(snapshot.status[rows]),
        rows,
    )


# --- exponential objectives (all to be maximised) -------------------------


def _exp_loglik_parts(X, beta, t, event):
    eta = linear_predictor(X, beta)
    with np.errstate(over="ignore"):
        lam = np.exp(eta)
        value = float(np.sum(event * eta - lam * t))
    return eta, lam, value


def exponential_loglik(beta, fit_set):
    """Censored exponential log-likelihood and its gradient."""
    X = fit_set.X
    eta, lam, value = _exp_loglik_parts(X, beta, fit_set.observed, fit_set.event)
    return value, xt_dot(X, fit_set.event - lam * fit_set.observed)


def _penalty_floor(X, b, ridge):
    k = X.shape[1]
    return ridge * max(float(np.sum(weighted_gram(X, b).diagonal())) / k, 1e-300)


def _logdet_penalty(X, lam, b, eps, with_grad=True):
    u = b * lam
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        w = np.where(lam > 0, -np.expm1(-u) / lam, b)
    M = weighted_gram(X, w) + eps * np.eye(X.shape[1])
    try:
        c = cho_factor(M)
    except (LinAlgError, ValueError):
        return -np.inf, None
    value = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    if not with_grad:
        return value, None
    q = row_quadratic(X, cho_solve(c, np.eye(X.shape[1])))
    dw = b * np.exp(-u) - w
    return value, xt_dot(X, dw * q)


def exponential_firth_penalty(beta, fit_set, penalty_age=None, ridge=1e-10):
    """``log det(sum_i H_i(b_i)/lambda_i x_i x_i' + eps I)`` (value only)."""
    b = fit_set.age if penalty_age is None else penalty_age
    X = fit_set.X
    lam = np.exp(linear_predictor(X, beta))
    return _logdet_penalty(X, lam, b, _penalty_floor(X, b, ridge), with_grad=False)[0]


def _firth_parts(X, beta, t, b, event, eps):
    eta, lam, ll = _exp_loglik_parts(X, beta, t, event)
    pen, pgrad = _logdet_penalty(X, lam, b, eps)
    if not np.isfinite(pen) or not np.isfinite(ll):
        return -np.inf, None, lam
    grad = xt_dot(X, event - lam * t) + pgrad
    return ll + pen, grad, lam


def exponential_firth_loglik(beta, fit_set, penalty_age=None, ridge=1e-10):
    """Penalised log-likelihood and gradient for exponential delays."""
    b = fit_set.age if penalty_age is None else np.asarray(penalty_age, dtype=np.float64)
    eps = _penalty_floor(fit_set.X, b, ridge)
    value, grad, _ = _firth_parts(fit_set.X, beta, fit_set.observed, b, fit_set.event, eps)
    return value, grad


def _newton_ascent(fun, beta0, opts, label):
    """Maximise ``fun`` returning (value, gradient, positive-definite curvature).

    Step-halving guarantees ascent.  When no halved step improves the
    objective the fit is accepted only if the Newton-predicted gain is at
    roundoff level relative to the objective.  Iterates beyond ``_COEF_LIMIT`` mean the
    likelihood is unbounded in some direction (e.g. no converted rows).
    """
    beta = beta0.copy()
    value, grad, N = fun(beta)
    if not np.isfinite(value):
        raise NonConvergence(f"{label}: objective non-finite at start")
    it = 0
    for it in range(1, opts.max_iterations + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= opts.gradient_tolerance:
            return OptimizationResult(beta, value, gnorm, it - 1, True, N, message="converged")
        delta = ridge_solve(N, grad, opts.ridge)
        step = 1.0
        # near the optimum objective differences are pure roundoff
        slack = 64.0 * np.finfo(float).eps * (1.0 + abs(value))
        for _ in range(opts.step_halving_limit):
            cand = beta + step * delta
            v_new, g_new, N_new = fun(cand)
            if np.isfinite(v_new) and v_new >= value - slack:
                break
            step *= 0.5
        else:
            # no ascent possible: accept if the predicted gain is at roundoff level
            gain = float(grad @ delta)
            if gnorm <= 1e3 * opts.gradient_tolerance or gain <= 1e-10 * (1.0 + abs(value)):
                return OptimizationResult(
                    beta, value, gnorm, it, True, N, message="stalled at roundoff level"
                )
            raise NonConvergence(
                f"{label}: step-halving failed (gradient norm {gnorm:.3g})",
                result=OptimizationResult(beta, value, gnorm, it, False, N),
            )
        beta, value, grad, N = cand, v_new, g_new, N_new
        if np.max(np.abs(beta)) > _COEF_LIMIT:
            raise NonConvergence(
                f"{label}: coefficients diverging (|b| > {_COEF_LIMIT:g})",
                result=OptimizationResult(beta, value, float(np.linalg.norm(grad)), it, False),
            )
    raise NonConvergence(
        f"{label}: no convergence in {opts.max_iterations} iterations",
        result=OptimizationResult(beta, value, float(np.linalg.norm(grad)), it, False, N),
    )


def _exp_start(t, event, k):
    beta = np.zeros(k)
    rate = (event.sum() + 0.5) / max(float(t.sum()), 1e-12)
    beta[0] = np.log(rate)
    return beta


def _fit_exponential_core(X, t, event, b, penalized, opts, start=None):
    """Fit on the active columns of ``X``; inactive coefficients stay zero."""
    k = X.shape[1]
    act = independent_columns(X)
    Xa = X[:, act]
    beta0 = _exp_start(t, event, k)[act] if start is None else np.asarray(start)[act]

    if penalized:
        eps = _penalty_floor(Xa, b, opts.ridge)

        def fun(beta):
            value, grad, lam = _firth_parts(Xa, beta, t, b, event, eps)
            return value, grad, weighted_gram(Xa, lam * t)
    else:

        def fun(beta):
            eta, lam, value = _exp_loglik_parts(Xa, beta, t, event)
            return value, xt_dot(Xa, event - lam * t), weighted_gram(Xa, lam * t)

    res = _newton_ascent(fun, beta0, opts, "firth" if penalized else "mle")
    full = np.zeros(k)
    full[act] = res.argmin
    res.argmin = full
    return res


def _check_fit_set(fit_set):
    if fit_set.n == 0:
        raise EmptyFitSet("no rows in delay fit set")


def fit_exponential_mle(fit_set, opts=None, *, return_result=False):
    """Censored exponential MLE of the rate coefficients."""
    _check_fit_set(fit_set)
    opts = opts or NewtonOptions()
    res = _fit_exponential_core(
        fit_set.X, fit_set.observed, fit_set.event, fit_set.age, False, opts
    )
    model = DelayModel(EXPONENTIAL, res.argmin)
    return (model, res) if return_result else model


def fit_exponential_firth(fit_set, opts=None, *, penalty_age=None, return_result=False):
    """Bias-reduced (penalised) censored exponential fit."""
    _check_fit_set(fit_set)
    opts = opts or NewtonOptions()
    b = fit_set.age if penalty_age is None else penalty_age
    res = _fit_exponential_core(fit_set.X, fit_set.observed, fit_set.event, b, True, opts)
    model = DelayModel(EXPONENTIAL, res.argmin)
    return (model, res) if return_result else model


# --- Weibull -------------------------------------------------------------


def weibull_loglik(params, fit_set):
    """Censored Weibull log-likelihood in ``(b, log shape)`` and its gradient.

    ``params`` is the coefficient vector with ``log(shape)`` appended.
    """
    X = fit_set.X
    beta, rho = params[:-1], params[-1]
    nu = np.exp(rho)
    eta = linear_predictor(X, beta)
    d = fit_set.event
    lz = np.log(np.maximum(fit_set.observed, _TINY_DELAY))
    r = lz - eta
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.exp(nu * r)
        value = float(np.sum(d * (rho + (nu - 1.0) * lz - nu * eta) - s))
        g_eta = -nu * d + nu * s
        g_rho = float(np.sum(d * (1.0 + nu * r) - s * nu * r))
    return value, np.concatenate([xt_dot(X, g_eta), [g_rho]])


def _weibull_transform(fit_set, nu, penalty_age):
    t = np.power(np.maximum(fit_set.observed, 0.0), nu)
    if penalty_age == "z":
        b = t
    elif penalty_age == "a":
        b = np.power(fit_set.age, nu)
    else:
        raise ValueError("penalty_age must be 'a' or 'z'")
    return t, b


def _weibull_jacobian(fit_set, nu):
    lz = np.log(np.maximum(fit_set.observed, _TINY_DELAY))
    return float(np.sum(fit_set.event * (np.log(nu) + (nu - 1.0) * lz)))


def weibull_firth_loglik(beta, shape, fit_set, penalty_age="a", ridge=1e-10):
    """Penalised Weibull log-likelihood for a fixed shape, and its gradient.

    On the ``z ** shape`` scale the delays are exponential with rate
    ``exp(-shape * x'b)``; the exponential penalty is applied there.
    ``penalty_age="z"`` evaluates the cdf in the penalty at the observed delay
    instead of the age.
    """
    nu = float(shape)
    t, b = _weibull_transform(fit_set, nu, penalty_age)
    theta = -nu * np.asarray(beta, dtype=np.float64)
    eps = _penalty_floor(fit_set.X, b, ridge)
    value, grad, _ = _firth_parts(fit_set.X, theta, t, b, fit_set.event, eps)
    if grad is None:
        return -np.inf, None
    return value + _weibull_jacobian(fit_set, nu), -nu * grad


def fit_weibull_mle(fit_set, opts=None, *, return_result=False):
    """Joint censored Weibull MLE of coefficients and shape (L-BFGS)."""
    _check_fit_set(fit_set)
    opts = opts or NewtonOptions()
    if fit_set.n_events == 0:
        raise NonConvergence("no converted rows: Weibull shape is not identified", stage="shape")
    k = fit_set.k
    act = independent_columns(fit_set.X)
    sub = DelayFitSet(
        fit_set.X[:, act], fit_set.observed, fit_set.age, fit_set.event, fit_set.rows
    )
    try:
        start_exp = _fit_exponential_core(
            sub.X, sub.observed, sub.event, sub.age, False, opts
        ).argmin
    except NumericalError:
        start_exp = _exp_start(sub.observed, sub.event, sub.k)
    x0 = np.concatenate([-start_exp, [0.0]])
    n = float(sub.n)

    def fun(p):
        v, g = weibull_loglik(p, sub)
        return -v / n, -g / n

    lbfgs_opts = NewtonOptions(
        max_iterations=max(opts.max_iterations, 2000),
        gradient_tolerance=max(opts.gradient_tolerance, 1e-9),
    )
    try:
        res = minimize(fun, x0, lbfgs_opts, max_abs=_COEF_LIMIT)
    except NumericalError as exc:
        raise exc.with_stage("shape")
    nu = float(np.exp(res.argmin[-1]))
    if not (SHAPE_RANGE[0] <= nu <= SHAPE_RANGE[1]):
        raise ShapeOutOfRange(f"fitted shape {nu:.4g} outside {SHAPE_RANGE}", stage="shape")
    full = np.zeros(k)
    full[act] = res.argmin[:-1]
    model = DelayModel(WEIBULL, full, nu)
    return (model, res) if return_result else model


def fit_weibull_firth(fit_set, opts=None, *, shape=None, penalty_age="a", return_result=False):
    """Two-stage Weibull fit: shape by MLE (unless given), then the penalised
    scale coefficients with the shape held fixed."""
    _check_fit_set(fit_set)
    opts = opts or NewtonOptions()
    if shape is None:
        shape = fit_weibull_mle(fit_set, opts).shape
    nu = float(shape)
    if not nu > 0:
        raise ValueError("shape must be positive")
    t, b = _weibull_transform(fit_set, nu, penalty_age)
    try:
        res = _fit_exponential_core(fit_set.X, t, fit_set.event, b, True, opts)
    except NumericalError as exc:
        raise exc.with_stage("scale")
    res.argmin = -res.argmin / nu
    model = DelayModel(WEIBULL, res.argmin, nu)
    return (model, res) if return_result else model


# --- truncated fits on converted rows --------------------------------------


def truncated_loglik(params, fit_set, family=EXPONENTIAL):
    """Log-likelihood of converted delays, each truncated at its click age.

    Row ``i`` contributes ``log h_i(z_i) - log H_i(a_i)``.  For the
    exponential family ``params`` is the rate coefficient vector; for the
    Weibull family it is ``[scale coefficients, log shape]``.
    Returns ``(value, gradient)``.
    """
    X, z, a = fit_set.X, fit_set.observed, fit_set.age
    if np.any(fit_set.event != 1):
        raise ValueError("truncated likelihood takes converted rows only")
    params = np.asarray(params, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if family == EXPONENTIAL:
            eta = linear_predictor(X, check_coef(params, fit_set.k))
            lam = np.exp(eta)
            u = lam * a
            value = np.sum(eta - lam * z - np.log(-np.expm1(-u)))
            r = _u_over_expm1(u)
            return float(value), xt_dot(X, 1.0 - lam * z - r)
        if family != WEIBULL:
            raise ValueError(f"unknown family {family!r}")
        beta = check_coef(params[:-1], fit_set.k)
        rho = float(params[-1])
        nu = np.exp(rho)
        eta = linear_predictor(X, beta)
        lz = np.log(np.maximum(z, _TINY_DELAY)) - eta
        la = np.log(a) - eta
        v = np.exp(nu * lz)
        u = np.exp(nu * la)
        value = np.sum(rho - eta + (nu - 1.0) * lz - v - np.log(-np.expm1(-u)))
        r = _u_over_expm1(u)
        g_eta = nu * (v + r) - nu
        g_rho = np.sum(1.0 + nu * lz - nu * v * lz - nu * la * r)
    return float(value), np.concatenate([xt_dot(X, g_eta), [g_rho]])


def _u_over_expm1(u):
    out = np.ones_like(u)
    big = u > 1e-8
    out[big] = u[big] / np.expm1(u[big])
    return out


def fit_truncated(fit_set, family=EXPONENTIAL, opts=None, *, return_result=False):
    """Maximum likelihood of :func:`truncated_loglik` by L-BFGS.

    The Weibull fit estimates the shape jointly and raises
    :class:`ShapeOutOfRange` when it leaves ``SHAPE_RANGE``.
    """
    _check_fit_set(fit_set)
    if fit_set.n_events != fit_set.n:
        raise ValueError("truncated fits take converted rows only")
    opts = opts or NewtonOptions()
    act = independent_columns(fit_set.X)
    sub = DelayFitSet(fit_set.X[:, act], fit_set.observed, fit_set.age, fit_set.event,
                      fit_set.rows)
    start = _exp_start(sub.observed, sub.event, sub.k)
    lbfgs_opts = NewtonOptions(
        max_iterations=max(opts.max_iterations, 2000),
        gradient_tolerance=max(opts.gradient_tolerance, 1e-9),
    )
    n = float(sub.n)

    def run(fam, x0):
        def fun(p):
            v, g = truncated_loglik(p, sub, fam)
            return -v / n, -g / n
        return minimize(fun, x0, lbfgs_opts, max_abs=_COEF_LIMIT)

    try:
        res = run(EXPONENTIAL, start)
        if family == WEIBULL:
            res = run(WEIBULL, np.concatenate([-res.argmin, [0.0]]))
    except NumericalError as exc:
        raise exc.with_stage("truncated")
    full = np.zeros(fit_set.k)
    if family == WEIBULL:
        nu = float(np.exp(res.argmin[-1]))
        if not (SHAPE_RANGE[0] <= nu <= SHAPE_RANGE[1]):
            raise ShapeOutOfRange(f"fitted shape {nu:.4g} outside {SHAPE_RANGE}",
                                  stage="truncated")
        full[act] = res.argmin[:-1]
        model = DelayModel(WEIBULL, full, nu)
    else:
        full[act] = res.argmin
        model = DelayModel(EXPONENTIAL, full)
    return (model, res) if return_result else model
