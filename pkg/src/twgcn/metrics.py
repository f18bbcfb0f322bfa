"""Forecast error metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

SMAPE_EPS = 1e-8


@dataclass
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    smape_percent: float
    r2: float
    mase: float
    explained_variance: float
    n_samples: int
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; undefined values go out as null with a flag
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


def naive_scale(series) -> float:
    """Mean absolute one-step change along axis 0 (per column for 2-D input)."""
    s = np.asarray(series, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("naive_scale needs at least two time steps")
    return float(np.mean(np.abs(np.diff(s, axis=0))))


def _ratio_score(num: float, den: float, name: str, flags: dict) -> float:
    if den == 0.0:
        if num == 0.0:
            return 1.0
        flags[name] = "undefined: target has zero variance"
        return float("nan")
    return 1.0 - num / den


def evaluate(y_true, y_pred, y_train=None) -> MetricsReport:
    """Error metrics between two equally shaped arrays.

    MASE divides MAE by the mean absolute one-step change of ``y_train``
    (time on axis 0), falling back to ``y_true`` itself when no training
    series is given.
    """
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ValueError(f"evaluate: shape mismatch {yt.shape} vs {yp.shape}")
    if yt.size < 2:
        raise ValueError("evaluate: need at least two values")
    flags: dict = {}
    e = (yt - yp).ravel()
    y = yt.ravel()
    mae = float(np.mean(np.abs(e)))
    mse = float(np.mean(e * e))
    smape = float(100.0 / e.size * np.sum(np.abs(e) / ((np.abs(y) + np.abs(yp.ravel())) / 2 + SMAPE_EPS)))
    sse = float(np.sum(e * e))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = _ratio_score(sse, sst, "r2", flags)
    ev = _ratio_score(float(np.var(e)), float(np.var(y)), "explained_variance", flags)
    scale = naive_scale(yt if y_train is None else y_train)
    if scale == 0.0:
        flags["mase"] = "undefined: naive forecast has zero error"
        mase = float("nan")
    else:
        mase = mae / scale
    return MetricsReport(mae, mse, math.sqrt(mse), smape, r2, mase, ev, int(e.size), flags)
