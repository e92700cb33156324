"""Ridge-regularized canonical correlation analysis between two views."""

from __future__ import annotations

import numpy as np


class RccaError(RuntimeError):
    pass


def rcca(view_x: np.ndarray, view_y: np.ndarray, components: int,
         lam: float) -> np.ndarray:
    """Canonical correlations of two n-row views, sorted descending.

    Columns are mean-centered internally; both covariance operators get a
    ridge term lam * I. The requested component count is capped by the
    view widths; correlations are clipped to [0, 1].
    """
    X = np.asarray(view_x, dtype=np.float64)
    Y = np.asarray(view_y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"rcca: views must share the sample axis, "
                         f"got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if components < 1:
        raise ValueError(f"rcca: components must be >= 1, got {components}")
    if n <= components:
        raise ValueError(f"rcca: need n > components, got n={n}, components={components}")
    k = min(components, X.shape[1], Y.shape[1])

    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    denom = max(n - 1, 1)
    sxx = X.T @ X / denom + lam * np.eye(X.shape[1])
    syy = Y.T @ Y / denom + lam * np.eye(Y.shape[1])
    sxy = X.T @ Y / denom

    isx = _inv_sqrt(sxx, "x")
    isy = _inv_sqrt(syy, "y")
    sv = np.linalg.svd(isx @ sxy @ isy, compute_uv=False)
    return np.clip(sv[:k], 0.0, 1.0)


def _inv_sqrt(cov: np.ndarray, label: str) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    floor = np.finfo(np.float64).eps * max(1.0, evals.max())
    if evals.min() <= floor:
        cond = (np.inf if evals.min() <= 0
                else evals.max() / evals.min())
        raise RccaError(
            f"view {label} covariance is rank deficient beyond the ridge "
            f"(condition estimate {cond:.3e}); increase lambda")
    return (evecs / np.sqrt(evals)) @ evecs.T
