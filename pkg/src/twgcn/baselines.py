"""Reference forecasters: persistence and penalised linear regression."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

FALLBACK_RIDGE = 1e-8


def fit_linear(x, y, lam: float = 0.0) -> tuple[np.ndarray, float, bool]:
    """Ridge regression with an unpenalised intercept via the normal equations.

    ``lam=0`` is ordinary least squares. If the normal matrix is singular at
    ``lam=0`` a ridge of 1e-8 is used instead and the returned flag is True.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc
    rhs = xc.T @ yc
    fell_back = False
    if lam == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        log.warning("singular normal matrix; falling back to ridge %g", FALLBACK_RIDGE)
        lam, fell_back = FALLBACK_RIDGE, True
    coef = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs)
    return coef, float(ym - xm @ coef), fell_back


def fit_lasso(x, y, lam: float, tol: float = 1e-8, max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    """Coordinate descent for ``(1/2n)|y - Xb - c|^2 + lam |b|_1``.

    Stops when no coefficient moves by more than ``tol`` in a full sweep.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc / n
    corr = xc.T @ yc / n
    b = np.zeros(d)
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(d):
            if gram[j, j] == 0.0:
                continue
            rho = corr[j] - gram[j] @ b + gram[j, j] * b[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / gram[j, j]
            biggest = max(biggest, abs(new - b[j]))
            b[j] = new
        if biggest <= tol:
            break
    else:
        log.warning("lasso did not converge in %d sweeps", max_iter)
    return b, float(ym - xm @ b)


def flatten_windows(inputs: np.ndarray, geo: np.ndarray) -> np.ndarray:
    """One row per (window, station): the station's window, flattened, then its static features."""
    b, t, n, f = inputs.shape
    dyn = np.transpose(inputs, (0, 2, 1, 3)).reshape(b * n, t * f)
    static = np.broadcast_to(geo, (b, n, geo.shape[1])).reshape(b * n, -1)
    return np.concatenate([dyn, static], axis=1)


def persistence(inputs: np.ndarray, kwh_channel: int = -1) -> np.ndarray:
    """Last observed target in each window: ``(B, N)``."""
    return inputs[:, -1, :, kwh_channel].copy()
