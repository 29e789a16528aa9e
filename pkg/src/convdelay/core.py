"""Click data model, observation-time semantics and the logistic link.

Times are real-valued days.  A click observed at analysis time ``t`` has age
``a = min(t - click_time, W)``; it counts as converted (``y = 1``) only if its
conversion happened strictly before ``t`` and strictly within ``W`` days of the
click.  The observed delay is ``z = delay`` for converted rows and ``z = a``
otherwise, so that ``y = 1`` exactly when ``z < a``.
"""

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ._validation import check_coef, check_design, linear_predictor


def logistic(eta):
    """Numerically stable ``exp(eta) / (1 + exp(eta))``.

    Works on scalars and arrays; never overflows for finite input.
    """
    return expit(eta)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class FeatureVector:
    """Sparse covariate vector with a mandatory intercept entry at index 0."""

    indices: tuple
    values: tuple
    dimension: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        val = tuple(float(v) for v in self.values)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if len(idx) != len(val):
            raise ValueError("indices and values differ in length")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not idx or idx[0] != 0 or val[0] != 1.0:
            raise ValueError("index 0 must be present with value 1 (intercept)")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("indices must be strictly increasing")
        if idx[-1] >= self.dimension:
            raise ValueError("index out of range for dimension")
        if not all(np.isfinite(val)):
            raise ValueError("values must be finite")

    @classmethod
    def from_dense(cls, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        nz = np.flatnonzero(x)
        if nz.size == 0 or nz[0] != 0:
            nz = np.concatenate([[0], nz])
        return cls(tuple(nz), tuple(x[nz]), x.shape[0])

    def to_dense(self):
        x = np.zeros(self.dimension)
        x[list(self.indices)] = self.values
        return x

    def dot(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape[0] != self.dimension:
            raise ValueError(
                f"coefficient length {beta.shape[0]} != feature dimension {self.dimension}"
            )
        return float(sum(v * beta[i] for i, v in zip(self.indices, self.values)))


@dataclass(frozen=True)
class ClickRecord:
    click_time: float
    features: FeatureVector
    conversion_time: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.click_time) or self.click_time < 0:
            raise ValueError("click_time must be finite and non-negative")
        if self.conversion_time is not None:
            if not np.isfinite(self.conversion_time):
                raise ValueError("conversion_time must be finite")
            if self.conversion_time <= self.click_time:
                raise ValueError("conversion_time must be later than click_time")

    @property
    def converted(self):
        return self.conversion_time is not None

    @property
    def delay(self):
        if self.conversion_time is None:
            return None
        return self.conversion_time - self.click_time


def conversion_probability(beta, x):
    """Logistic conversion probability for one :class:`FeatureVector`."""
    return float(logistic(x.dot(beta)))


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClickData:
    """Columnar collection of clicks.

    ``conversion_time`` is NaN for clicks that never convert.  ``X`` is dense or
    CSR with the intercept in column 0.
    """

    click_time: np.ndarray
    conversion_time: np.ndarray
    X: object

    def __post_init__(self):
        X = check_design(self.X)
        ct = _frozen(self.click_time).reshape(-1)
        cv = _frozen(self.conversion_time).reshape(-1)
        n = ct.shape[0]
        if X.shape[0] != n or cv.shape[0] != n:
            raise ValueError("click_time, conversion_time and X disagree in length")
        if np.any(~np.isfinite(ct)) or np.any(ct < 0):
            raise ValueError("click times must be finite and non-negative")
        has = ~np.isnan(cv)
        if np.any(np.isinf(cv)) or np.any(cv[has] <= ct[has]):
            raise ValueError("conversion_time must be later than click_time")
        col0 = X[:, 0].toarray().ravel() if sp.issparse(X) else X[:, 0]
        if n and not np.all(col0 == 1.0):
            raise ValueError("column 0 of X must be the intercept (all ones)")
        if not sp.issparse(X):
            X = X.copy()
            X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "click_time", ct)
        object.__setattr__(self, "conversion_time", cv)

    @property
    def n(self):
        return self.click_time.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def delay(self):
        return self.conversion_time - self.click_time

    def eventual_status(self, window):
        """``C_i``: converts at all, with delay strictly below ``window``."""
        d = self.delay
        out = np.zeros(self.n)
        ok = ~np.isnan(d)
        out[ok] = (d[ok] < window).astype(float)
        return out

    def subset(self, idx):
        idx = np.asarray(idx)
        return ClickData(self.click_time[idx], self.conversion_time[idx], self.X[idx])

    @classmethod
    def from_records(cls, records: Sequence[ClickRecord]):
        records = list(records)
        if not records:
            raise ValueError("no records")
        k = records[0].features.dimension
        rows, cols, vals = [], [], []
        for i, r in enumerate(records):
            if r.features.dimension != k:
                raise ValueError("records have inconsistent feature dimensions")
            rows.extend([i] * len(r.features.indices))
            cols.extend(r.features.indices)
            vals.extend(r.features.values)
        X = sp.csr_matrix((vals, (rows, cols)), shape=(len(records), k))
        ct = [r.click_time for r in records]
        cv = [np.nan if r.conversion_time is None else r.conversion_time for r in records]
        return cls(np.array(ct), np.array(cv), X)

    def records(self) -> Iterable[ClickRecord]:
        X = sp.csr_matrix(self.X)
        for i in range(self.n):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            fv = FeatureVector(tuple(X.indices[lo:hi]), tuple(X.data[lo:hi]), self.k)
            cv = self.conversion_time[i]
            yield ClickRecord(
                float(self.click_time[i]), fv, None if np.isnan(cv) else float(cv)
            )


def as_click_data(dataset):
    if isinstance(dataset, ClickData):
        return dataset
    return ClickData.from_records(dataset)


@dataclass(frozen=True)
class ObservationSnapshot:
    """The data as visible at ``analysis_time``.

    ``rows`` indexes the originating :class:`ClickData` (``None`` when the
    snapshot was built directly from arrays).
    """

    analysis_time: float
    window: float
    X: object
    age: np.ndarray
    status: np.ndarray
    observed: np.ndarray
    rows: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        X = check_design(self.X)
        age = _frozen(self.age).reshape(-1)
        y = _frozen(self.status).reshape(-1)
        z = _frozen(self.observed).reshape(-1)
        n = X.shape[0]
        if not (age.shape[0] == y.shape[0] == z.shape[0] == n):
            raise ValueError("snapshot arrays disagree in length")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("status must be 0/1")
        if np.any(age < 0) or np.any(age > self.window):
            raise ValueError("ages must lie in [0, window]")
        if np.any(z < 0) or np.any(z > age):
            raise ValueError("observed delays must lie in [0, age]")
        conv = y == 1
        if np.any(z[conv] >= age[conv]) or np.any(z[~conv] != age[~conv]):
            raise ValueError("status must satisfy y = 1 <=> z < a")
        if not sp.issparse(X):
            X = X.copy()
            X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "age", age)
        object.__setattr__(self, "status", y)
        object.__setattr__(self, "observed", z)
        if self.rows is not None:
            rows = np.array(self.rows, dtype=np.int64)
            rows.setflags(write=False)
            object.__setattr__(self, "rows", rows)

    @classmethod
    def from_arrays(cls, X, status, age, observed=None, *, window=None, analysis_time=np.nan):
        """Build a snapshot from estimator-style arrays.

        ``observed`` only matters for converted rows; unconverted rows get
        ``z = a``.  ``window`` defaults to the largest age (at least 1e-12).
        """
        age = np.asarray(age, dtype=np.float64).reshape(-1)
        status = np.asarray(status, dtype=np.float64).reshape(-1)
        if observed is None:
            if np.any(status == 1):
                raise ValueError("observed delays are required for converted rows")
            observed = age
        z = np.where(status == 1, np.asarray(observed, dtype=np.float64).reshape(-1), age)
        if window is None:
            window = max(float(age.max(initial=0.0)), 1e-12)
        return cls(float(analysis_time), float(window), X, age, status, z)

    @property
    def n(self):
        return self.age.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def n_converted(self):
        return int(self.status.sum())


def snapshot_at(dataset, t, window):
    """Return the :class:`ObservationSnapshot` of ``dataset`` at time ``t``."""
    if not (np.isfinite(t) and t > 0):
        raise ValueError(f"analysis time must be positive, got {t}")
    if not (np.isfinite(window) and window > 0):
        raise ValueError(f"window must be positive, got {window}")
    data = as_click_data(dataset)
    rows = np.flatnonzero(data.click_time <= t)
    t0 = data.click_time[rows]
    conv = data.conversion_time[rows]
    age = np.minimum(t - t0, window)
    delay = conv - t0
    with np.errstate(invalid="ignore"):
        y = (~np.isnan(conv)) & (conv < t) & (delay < window)
    z = np.where(y, delay, age)
    return ObservationSnapshot(
        float(t), float(window), data.X[rows], age, y.astype(float), z, rows=rows
    )


def predict_probability(beta, X):
    """Per-row logistic probabilities for a design matrix."""
    X = check_design(X)
    beta = check_coef(beta, X.shape[1])
    return logistic(linear_predictor(X, beta))
