"""Input validation and design-matrix helpers shared by every estimator.

Design matrices may be dense ``ndarray`` or any ``scipy.sparse`` matrix; the
helpers below hide the difference so the fitting code can stay generic.
"""

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular


def check_design(X, *, name="X"):
    """Return ``X`` as float64 dense array or CSR matrix, with finite entries."""
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64)
        data = X.data
    else:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
        data = X
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name} contains non-finite values")
    if X.shape[1] == 0:
        raise ValueError(f"{name} has no columns")
    return X


def check_vector(v, n, *, name, nonnegative=False):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if nonnegative and np.any(v < 0):
        raise ValueError(f"{name} must be non-negative")
    return v


def check_binary(y, n, *, name="y"):
    y = check_vector(y, n, name=name)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must contain only 0/1 values")
    return y


def check_coef(beta, k, *, name="beta"):
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] != k:
        raise ValueError(f"{name} has length {beta.shape[0]}, design has {k} columns")
    if not np.all(np.isfinite(beta)):
        raise ValueError(f"{name} contains non-finite values")
    return beta


def linear_predictor(X, beta):
    return np.asarray(X @ beta, dtype=np.float64).reshape(-1)


def xt_dot(X, v):
    """``X.T @ v`` as a flat array."""
    return np.asarray(X.T @ v, dtype=np.float64).reshape(-1)


def weighted_gram(X, w):
    """Dense ``X.T @ diag(w) @ X``."""
    if sp.issparse(X):
        G = X.T @ X.multiply(w[:, None]).tocsr()
        return np.asarray(G.toarray())
    return X.T @ (X * w[:, None])


def row_quadratic(X, A):
    """``x_i' A x_i`` for every row ``i`` of ``X``."""
    XA = X @ A
    if sp.issparse(X):
        return np.asarray(X.multiply(XA).sum(axis=1)).reshape(-1)
    return np.einsum("ij,ij->i", XA, X)


def take_rows(X, idx):
    return X[idx]


def independent_columns(X, tol=1e-9):
    """Mask of a maximal linearly independent set of columns, chosen left to right.

    Column ``j`` is kept when its residual after projecting on the kept
    columns carries more than ``tol`` of its squared norm.  One-hot blocks
    next to an intercept thus lose one indicator each.
    """
    G = weighted_gram(X, np.ones(X.shape[0]))
    k = G.shape[0]
    keep = np.zeros(k, dtype=bool)
    L = np.zeros((0, 0))
    for j in range(k):
        gjj = G[j, j]
        if not gjj > 0:
            continue  # all-zero column
        idx = np.flatnonzero(keep)
        y = solve_triangular(L, G[idx, j], lower=True) if idx.size else np.zeros(0)
        r = gjj - float(y @ y)
        if r > tol * gjj:
            keep[j] = True
            m = L.shape[0]
            L2 = np.zeros((m + 1, m + 1))
            L2[:m, :m] = L
            L2[m, :m] = y
            L2[m, m] = np.sqrt(r)
            L = L2
    return keep
