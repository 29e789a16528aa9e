"""Optimisation kernels.

* :func:`solve_weighted_logistic_score` -- Newton iteration for
  ``sum_i x_i (w_i * logistic(x_i' b) - m_i) = 0``.
* :func:`minimize` -- limited-memory BFGS with Armijo backtracking.
* :func:`fd_gradient` -- central finite differences, used as a test oracle.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from ._validation import check_design, check_vector, linear_predictor, weighted_gram, xt_dot
from .exceptions import (
    NonConvergence,
    NonFiniteObjective,
    RankDeficient,
    SeparationDetected,
)

SEPARATION_LIMIT = 30.0


@dataclass(frozen=True)
class NewtonOptions:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    step_halving_limit: int = 30
    ridge: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.step_halving_limit < 1:
            raise ValueError("step_halving_limit must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class OptimizationResult:
    argmin: np.ndarray
    objective_value: float
    gradient_norm: float
    iterations: int
    converged: bool
    hessian_or_jacobian: Optional[np.ndarray] = None
    wall_time: float = 0.0
    message: str = ""
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {
            "objective": float(self.objective_value),
            "gradient_norm": float(self.gradient_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "wall_time": float(self.wall_time),
            "message": self.message,
        }


def ridge_solve(J, g, ridge):
    """Solve ``(J + ridge * max(diag J) * I) d = g`` by Cholesky.

    The ridge is relative to the Jacobian scale so that saturation (all
    curvature vanishing) is not masked by an absolute floor.
    """
    scale = float(np.max(np.abs(np.diag(J)), initial=0.0))
    if not np.isfinite(scale) or scale <= 0.0:
        raise RankDeficient("Jacobian is zero or non-finite")
    Jr = J + (ridge * scale) * np.eye(J.shape[0])
    try:
        return cho_solve(cho_factor(Jr, check_finite=True), g)
    except (LinAlgError, ValueError) as exc:
        raise RankDeficient(f"Jacobian not invertible: {exc}") from None


def _score(X, beta, w, m):
    p = expit(linear_predictor(X, beta))
    return xt_dot(X, w * p - m), p


def solve_weighted_logistic_score(X, targets, multipliers=None, start=None, opts=None):
    """Newton solve of the weighted logistic estimating equations.

    Parameters
    ----------
    X : array or sparse matrix, shape (n, k)
    targets : array, shape (n,)
        Non-negative targets ``m_i``.
    multipliers : array, shape (n,), optional
        Per-row ``w_i`` in ``(0, 1]``; defaults to ones, which makes the
        equations the logistic-regression likelihood score.
    start : array, shape (k,), optional
    opts : NewtonOptions, optional

    Returns
    -------
    OptimizationResult
        ``hessian_or_jacobian`` holds ``sum_i w_i p_i (1 - p_i) x_i x_i'`` at
        the solution; ``objective_value`` is the final score norm.

    Raises
    ------
    SeparationDetected
        A coefficient exceeded 30 in magnitude (the fitted means are
        saturating towards the boundary and no finite root exists).
    NonConvergence
        Iterations exhausted or no step-halving reduced the score norm.
    RankDeficient
        The Jacobian cannot be inverted even with the ridge.

    Notes
    -----
    Convergence needs both a small score and a small full Newton step.  The
    step criterion stops a saturating fit (all targets on the boundary) from
    passing as converged just because its score decays geometrically.
    """
    opts = opts or NewtonOptions()
    t0 = time.perf_counter()
    X = check_design(X)
    n, k = X.shape
    m = check_vector(targets, n, name="targets", nonnegative=True)
    w = np.ones(n) if multipliers is None else check_vector(multipliers, n, name="multipliers")
    if np.any(w <= 0):
        raise ValueError("multipliers must be positive")
    beta = np.zeros(k) if start is None else check_vector(start, k, name="start").copy()

    step_tol = np.sqrt(opts.gradient_tolerance)
    s, p = _score(X, beta, w, m)
    norm = float(np.linalg.norm(s))
    J = None

    def result(converged, it, msg):
        return OptimizationResult(
            beta, norm, norm, it, converged, J, time.perf_counter() - t0, msg
        )

    for it in range(1, opts.max_iterations + 1):
        J = weighted_gram(X, w * p * (1.0 - p))
        delta = ridge_solve(J, s, opts.ridge)
        if norm <= opts.gradient_tolerance and np.max(np.abs(delta)) <= step_tol:
            return result(True, it - 1, "score below tolerance")
        step = 1.0
        for _ in range(opts.step_halving_limit):
            cand = beta - step * delta
            s_new, p_new = _score(X, cand, w, m)
            norm_new = float(np.linalg.norm(s_new))
            if np.isfinite(norm_new) and norm_new < norm:
                break
            step *= 0.5
        else:
            if norm <= opts.gradient_tolerance:
                return result(True, it - 1, "score below tolerance; no further decrease")
            raise NonConvergence(
                f"step-halving failed to reduce score norm {norm:.3g}",
                result=result(False, it, "step-halving failed"),
            )
        beta, s, p, norm = cand, s_new, p_new, norm_new
        if np.max(np.abs(beta)) > SEPARATION_LIMIT:
            raise SeparationDetected(
                f"coefficient magnitude {np.max(np.abs(beta)):.1f} exceeds "
                f"{SEPARATION_LIMIT:g}; fitted means saturate",
                result=result(False, it, "separation"),
            )
    J = weighted_gram(X, w * p * (1.0 - p))
    raise NonConvergence(
        f"no convergence in {opts.max_iterations} iterations (score norm {norm:.3g})",
        result=result(False, opts.max_iterations, "iterations exhausted"),
    )


def minimize(
    fun: Callable,
    x0,
    opts: Optional[NewtonOptions] = None,
    *,
    memory: int = 10,
    armijo: float = 1e-4,
    max_abs: float = np.inf,
):
    """Minimise a smooth function with L-BFGS and backtracking line search.

    ``fun(x)`` must return ``(value, gradient)``.  Convergence is declared when
    the max-norm of the gradient falls below ``opts.gradient_tolerance``.
    Trial points with non-finite values are treated as failed line-search
    steps; :class:`NonFiniteObjective` is raised only when the start point is
    non-finite or no finite trial point can be found along a direction.

    On failure the exception's ``result`` holds the best iterate.
    """
    opts = opts or NewtonOptions(max_iterations=1000)
    t0 = time.perf_counter()
    x = np.array(x0, dtype=np.float64).reshape(-1)
    f, g = fun(x)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteObjective("objective or gradient non-finite at start point")
    S, Y, RHO = [], [], []

    def result(converged, it, msg):
        return OptimizationResult(
            x.copy(), float(f), float(np.max(np.abs(g))), it, converged, None,
            time.perf_counter() - t0, msg,
        )

    for it in range(opts.max_iterations):
        if np.max(np.abs(g)) <= opts.gradient_tolerance:
            return result(True, it, "gradient below tolerance")
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s_, y_, r_ in reversed(list(zip(S, Y, RHO))):
            a = r_ * (s_ @ q)
            alphas.append(a)
            q -= a * y_
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q *= min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        for (s_, y_, r_), a in zip(zip(S, Y, RHO), reversed(alphas)):
            b = r_ * (y_ @ q)
            q += (a - b) * s_
        d = -q
        slope = g @ d
        if not slope < 0:
            S, Y, RHO = [], [], []
            d = -g * min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
            slope = g @ d
        step = 1.0
        any_finite = False
        for _ in range(60):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            finite = np.isfinite(f_new) and np.all(np.isfinite(g_new))
            any_finite |= finite
            if finite and f_new <= f + armijo * step * slope:
                break
            step *= 0.5
        else:
            if not any_finite:
                raise NonFiniteObjective(
                    "objective became non-finite along the search direction",
                    result=result(False, it, "non-finite"),
                )
            if np.max(np.abs(g)) <= 10 * opts.gradient_tolerance:
                return result(True, it, "line search stalled at tolerance")
            raise NonConvergence(
                "line search failed to find sufficient decrease",
                result=result(False, it, "line search failed"),
            )
        g_new = np.asarray(g_new, dtype=np.float64)
        s_vec, y_vec = x_new - x, g_new - g
        sy = s_vec @ y_vec
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            S.append(s_vec)
            Y.append(y_vec)
            RHO.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Y.pop(0), RHO.pop(0)
        x, f, g = x_new, float(f_new), g_new
        if np.max(np.abs(x)) > max_abs:
            raise NonConvergence(
                f"iterate diverged beyond {max_abs:g}", result=result(False, it + 1, "diverged")
            )
    if np.max(np.abs(g)) <= opts.gradient_tolerance:
        return result(True, opts.max_iterations, "gradient below tolerance")
    raise NonConvergence(
        f"no convergence in {opts.max_iterations} iterations",
        result=result(False, opts.max_iterations, "iterations exhausted"),
    )


def fd_gradient(fun, x, h=1e-6):
    """Central-difference gradient of a scalar function.

    ``fun`` may return a scalar or a ``(value, gradient)`` pair; only the value
    is used.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)

    def value(v):
        out = fun(v)
        return float(out[0] if isinstance(out, tuple) else out)

    g = np.empty_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (value(x + e) - value(x - e)) / (2 * h)
    return g
