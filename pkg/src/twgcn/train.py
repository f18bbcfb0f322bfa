"""Windowing, training loop, evaluation and run artefacts."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from . import autodiff as ad
from .baselines import fit_lasso, fit_linear, flatten_windows, persistence
from .graph import (
    AdjacencyMatrix,
    DtwConfig,
    build_dem_adjacency,
    build_geo_adjacency,
    identity_adjacency,
    normalize_adjacency,
)
from .ingest import TRAFFIC_FEATURES, WEATHER_FEATURES, PanelSet, Scaler, fit_scaler, split_hours
from .metrics import MetricsReport, evaluate
from .model import ModelParams, encode, forward, init_model, mse_loss
from .regional import Clustering, kmeans, replicate_head, write_assignments_csv
from .temporal import KINDS, min_steps

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# -- configuration --------------------------------------------------------

_KEYS = {
    "lag_hours": "LAG_HOURS",
    "num_clusters": "NUM_CLUSTERS",
    "model_kind": "MODEL",
    "seq_length": "SEQ_LENGTH",
    "alpha": "ALPHA",
    "traffic_feature": "TRAFFIC_FEATURE",
    "weather_feature": "WEATHER_FEATURE",
    "adjacency": "ADJACENCY",
    "num_epochs": "NUM_EPOCHS",
    "seed": "SEED",
    "tau_km": "TAU_KM",
    "gamma": "GAMMA",
    "learning_rate": "LEARNING_RATE",
    "hidden": "HIDDEN",
    "gcn_layers": "GCN_LAYERS",
    "batch_size": "BATCH_SIZE",
    "warmup_epochs": "WARMUP_EPOCHS",
    "ridge_lambda": "RIDGE_LAMBDA",
    "lasso_lambda": "LASSO_LAMBDA",
    "split": "SPLIT",
}
_ALIASES = {v: k for k, v in _KEYS.items()} | {"MODEL_KIND": "model_kind"}

GRID_DOMAINS = {
    "lag_hours": (1, 3, 6),
    "num_clusters": (5, 10),
    "model_kind": KINDS,
    "seq_length": (4, 8, 12),
    "alpha": (0.33, 0.5, 0.66),
}


@dataclass(frozen=True)
class ExperimentConfig:
    lag_hours: int = 1
    num_clusters: int = 5
    model_kind: str = "1DCNN"
    seq_length: int = 8
    alpha: float = 0.5
    traffic_feature: bool = True
    weather_feature: bool = True
    adjacency: bool = True
    num_epochs: int = 125
    seed: int = 0
    tau_km: float = 25.0
    gamma: float | str = "auto"
    learning_rate: float = 1e-3
    hidden: int = 32
    gcn_layers: int = 2
    batch_size: int = 32
    warmup_epochs: int | None = None
    ridge_lambda: float = 1.0
    lasso_lambda: float = 1e-3
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "model_kind", str(self.model_kind).upper())
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if self.model_kind not in KINDS:
            raise ValueError(f"MODEL must be one of {KINDS}, got {self.model_kind!r}")
        if self.lag_hours < 1 or self.seq_length < 1:
            raise ValueError("LAG_HOURS and SEQ_LENGTH must be >= 1")
        if self.seq_length < min_steps(self.model_kind):
            raise ValueError(f"{self.model_kind} needs SEQ_LENGTH >= {min_steps(self.model_kind)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"ALPHA must lie in [0, 1], got {self.alpha}")
        if self.num_clusters < 1 or self.num_epochs < 0 or self.batch_size < 1:
            raise ValueError("NUM_CLUSTERS, NUM_EPOCHS and BATCH_SIZE must be positive")
        if self.learning_rate < 0:
            raise ValueError("LEARNING_RATE must be non-negative")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("SPLIT must be three fractions summing to 1")

    def to_mapping(self) -> dict:
        return {_KEYS[f.name]: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        kwargs = {}
        for key, value in data.items():
            name = key if key in _KEYS else _ALIASES.get(str(key).upper())
            if name is None:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def effective_warmup(self) -> int:
        return self.num_epochs // 5 if self.warmup_epochs is None else self.warmup_epochs


# -- windows --------------------------------------------------------------


class Windows(NamedTuple):
    inputs: np.ndarray  # (B, T, N, F_dem + 1); last channel is the target itself
    targets: np.ndarray  # (B, N)
    target_index: np.ndarray  # (B,) hour index of each target


def min_series_length(seq_length: int, lag_hours: int) -> int:
    return seq_length + lag_hours


def make_windows(panels: PanelSet, seq_length: int, lag_hours: int) -> Windows:
    """Sliding hourly windows.

    Window ``b`` covers hours ``[b, b + seq_length)`` and its target is each
    station's kWh at hour ``b + seq_length - 1 + lag_hours``.
    """
    total = panels.n_hours
    need = min_series_length(seq_length, lag_hours)
    if total < need:
        raise ValueError(f"series has {total} hours; need at least {need} for seq_length={seq_length}, lag={lag_hours}")
    frame = np.concatenate([panels.dem, panels.target[:, :, None]], axis=2)
    n_win = total - seq_length - lag_hours + 1
    view = np.lib.stride_tricks.sliding_window_view(frame, seq_length, axis=0)[:n_win]
    inputs = np.ascontiguousarray(np.moveaxis(view, -1, 1))
    idx = np.arange(n_win) + seq_length - 1 + lag_hours
    return Windows(inputs, panels.target[idx].copy(), idx)


def window_inputs_ending_at(panels: PanelSet, seq_length: int, ends) -> np.ndarray:
    """Input windows (no targets) whose last hour is each index in ``ends``."""
    frame = np.concatenate([panels.dem, panels.target[:, :, None]], axis=2)
    ends = np.asarray(ends)
    if np.any(ends < seq_length - 1) or np.any(ends >= panels.n_hours):
        raise ValueError("window end outside the panel")
    return np.stack([frame[e - seq_length + 1 : e + 1] for e in ends])


# -- data preparation -----------------------------------------------------


@dataclass
class Prepared:
    config: ExperimentConfig
    panels: PanelSet  # standardised, toggles applied
    scaler: Scaler
    train_end: int
    val_end: int
    a_geo: AdjacencyMatrix
    a_dem: AdjacencyMatrix
    gamma: float | None
    windows: Windows
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def floor(self) -> float:
        return self.scaler.zero_kwh

    def geo_input(self, batch: int) -> np.ndarray:
        t = self.config.seq_length
        return np.broadcast_to(self.panels.geo, (batch, t) + self.panels.geo.shape)

    def train_series(self) -> np.ndarray:
        return self.panels.target[: self.train_end]


def apply_toggles(panels: PanelSet, config: ExperimentConfig) -> PanelSet:
    """Zero out the traffic and/or weather columns of standardised panels."""
    off = []
    if not config.traffic_feature:
        off += TRAFFIC_FEATURES
    if not config.weather_feature:
        off += WEATHER_FEATURES
    if not off:
        return panels
    dem = panels.dem.copy()
    for name in off:
        if name in panels.dem_names:
            dem[:, :, panels.dem_names.index(name)] = 0.0
    return replace(panels, dem=dem)


def build_graphs(panels: PanelSet, train_end: int, config: ExperimentConfig) -> tuple[AdjacencyMatrix, AdjacencyMatrix, float | None]:
    """Raw geo and demand graphs from standardised panels; DTW sees training hours only."""
    n = len(panels)
    if not config.adjacency:
        return identity_adjacency(n, "geo"), identity_adjacency(n, "dem"), None
    geo = build_geo_adjacency(panels.coords, config.tau_km)
    if n == 1:
        return geo, identity_adjacency(1, "dem"), None
    dem, gamma = build_dem_adjacency(panels.target[:train_end].T, DtwConfig(gamma=config.gamma))
    return geo, dem, gamma


def standardize(raw: PanelSet, config: ExperimentConfig) -> tuple[PanelSet, Scaler, int, int]:
    """Chronological split, scaler fitted on training hours, toggles applied."""
    if raw.normalized:
        raise ValueError("expected raw (unstandardised) panels")
    raw = raw.aligned()
    train_end, val_end = split_hours(raw.n_hours, config.split)
    scaler = fit_scaler(raw, train_end)
    return apply_toggles(scaler.transform(raw), config), scaler, train_end, val_end


def prepare(raw: PanelSet, config: ExperimentConfig) -> Prepared:
    panels, scaler, train_end, val_end = standardize(raw, config)
    a_geo, a_dem, gamma = build_graphs(panels, train_end, config)
    win = make_windows(panels, config.seq_length, config.lag_hours)
    ti = win.target_index
    train_idx = np.flatnonzero(ti < train_end)
    val_idx = np.flatnonzero((ti >= train_end) & (ti < val_end))
    test_idx = np.flatnonzero(ti >= val_end)
    if train_idx.size == 0:
        raise ValueError("no training windows; the series is too short for this SEQ_LENGTH/LAG_HOURS")
    return Prepared(config, panels, scaler, train_end, val_end, normalize_adjacency(a_geo),
                    normalize_adjacency(a_dem), gamma, win, train_idx, val_idx, test_idx)


# -- training -------------------------------------------------------------


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, leaves: list[ad.Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p in leaves:
            m, v = self.state.get(id(p), (np.zeros_like(p.value), np.zeros_like(p.value)))
            m = b1 * m + (1 - b1) * p.grad
            v = b2 * v + (1 - b2) * p.grad * p.grad
            self.state[id(p)] = (m, v)
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def clone_state(self, src: ad.Tensor, dst: ad.Tensor) -> None:
        if id(src) in self.state:
            m, v = self.state[id(src)]
            self.state[id(dst)] = (m.copy(), v.copy())


@dataclass
class FitResult:
    params: ModelParams
    assignments: np.ndarray
    clustering: Clustering
    history: list[float] = field(default_factory=list)


def _chunks(idx: np.ndarray, size: int):
    for lo in range(0, idx.size, size):
        yield idx[lo : lo + size]


def predict_windows(params: ModelParams, prep: Prepared, assignments, idx: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Standardised forecasts ``(len(idx), N)`` for the given windows (no tape)."""
    out = []
    for part in _chunks(np.asarray(idx), chunk):
        x = prep.windows.inputs[part]
        y = forward(params, prep.geo_input(len(part)), x, prep.a_geo, prep.a_dem, assignments, prep.floor)
        out.append(y.value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(prep.panels)))


def station_summaries(params: ModelParams, prep: Prepared, idx: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Mean temporal summary per station over the given windows: ``(N, H)``."""
    total = None
    for part in _chunks(np.asarray(idx), chunk):
        z = encode(params, prep.geo_input(len(part)), prep.windows.inputs[part], prep.a_geo, prep.a_dem).value
        s = z.sum(axis=0)
        total = s if total is None else total + s
    return total / len(idx)


def _loss(params, prep, assignments, idx) -> float:
    pred = predict_windows(params, prep, assignments, idx)
    return float(np.mean((pred - prep.windows.targets[idx]) ** 2))


def fit(config: ExperimentConfig, prep: Prepared) -> FitResult:
    """Mini-batch Adam on the standardised-target MSE.

    The first ``warmup`` epochs train a single shared region head. Stations
    are then clustered on their mean temporal summary over the training
    windows, the shared head is copied into one head per cluster, and the
    assignment stays fixed for the rest of the run. The recorded history is
    the full training loss after each epoch.
    """
    n_stations = len(prep.panels)
    f_geo = prep.panels.geo.shape[1]
    f_dem = prep.windows.inputs.shape[-1]
    params = init_model(f_geo, f_dem, kind=config.model_kind, hidden=config.hidden, layers=config.gcn_layers,
                        alpha=config.alpha, n_regions=1, seed=config.seed)
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    assignments = np.zeros(n_stations, dtype=int)
    clustering: Clustering | None = None
    train_idx = prep.train_idx

    def regionalise():
        nonlocal clustering, assignments
        points = station_summaries(params, prep, train_idx)
        k = min(config.num_clusters, n_stations)
        if k < config.num_clusters:
            log.warning("NUM_CLUSTERS=%d exceeds %d stations; using %d", config.num_clusters, n_stations, k)
        clustering = kmeans(points, k, seed=config.seed)
        assignments = clustering.assignments.copy()
        shared = params.regions
        params.regions = replicate_head(shared, k)
        for head in params.regions.heads:
            for name, t in head.items():
                opt.clone_state(shared.heads[0][name], t)

    warmup = min(config.effective_warmup, config.num_epochs)
    if warmup == 0:
        regionalise()
    history = []
    for epoch in range(config.num_epochs):
        if epoch == warmup and clustering is None:
            regionalise()
        order = rng.permutation(train_idx)
        for batch in _chunks(order, config.batch_size):
            with ad.Tape() as tape:
                pred = forward(params, prep.geo_input(len(batch)), prep.windows.inputs[batch],
                               prep.a_geo, prep.a_dem, assignments, prep.floor)
                loss = mse_loss(pred, prep.windows.targets[batch])
            if not math.isfinite(float(loss.value)):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            leaves = ad.backward(tape, loss)
            opt.step(leaves)
        epoch_loss = _loss(params, prep, assignments, train_idx)
        if not math.isfinite(epoch_loss):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        history.append(epoch_loss)
    if clustering is None:
        regionalise()
    return FitResult(params, assignments, clustering, history)


# -- evaluation -----------------------------------------------------------


def run_baselines(prep: Prepared, idx: np.ndarray | None = None) -> dict[str, dict[str, MetricsReport]]:
    """Persistence, OLS, ridge and lasso fitted on training windows, scored on ``idx`` (default: test)."""
    cfg = prep.config
    idx = prep.test_idx if idx is None else idx
    win = prep.windows
    geo = prep.panels.geo
    y_test = win.targets[idx]
    x_tr = flatten_windows(win.inputs[prep.train_idx], geo)
    y_tr = win.targets[prep.train_idx].reshape(-1)
    x_te = flatten_windows(win.inputs[idx], geo)
    n = len(prep.panels)

    preds = {"persistence": persistence(win.inputs[idx])}
    coef, icpt, fb = fit_linear(x_tr, y_tr, 0.0)
    preds["linear"] = (x_te @ coef + icpt).reshape(-1, n)
    coef, icpt, _ = fit_linear(x_tr, y_tr, cfg.ridge_lambda)
    preds["ridge"] = (x_te @ coef + icpt).reshape(-1, n)
    coef, icpt = fit_lasso(x_tr, y_tr, cfg.lasso_lambda)
    preds["lasso"] = (x_te @ coef + icpt).reshape(-1, n)

    out = {}
    for name, p in preds.items():
        out[name] = score(prep, y_test, p)
        if name == "linear" and fb:
            out[name]["normalized"].flags["ridge_fallback"] = True
    return out


def score(prep: Prepared, y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, MetricsReport]:
    """Metrics on the standardised and on the raw kWh scale."""
    sc = prep.scaler
    train = prep.train_series()
    return {
        "normalized": evaluate(y_true, y_pred, train),
        "raw": evaluate(sc.unscale_target(y_true), sc.unscale_target(y_pred), sc.unscale_target(train)),
    }


@dataclass
class RunResult:
    config: ExperimentConfig
    prep: Prepared
    fit: FitResult
    test_pred: np.ndarray
    metrics: dict[str, MetricsReport]
    baselines: dict[str, dict[str, MetricsReport]]

    def report(self) -> dict:
        p = self.prep
        return {
            "config": self.config.to_mapping(),
            "config_hash": self.config.config_hash(),
            "stations": list(p.panels.station_ids),
            "split_hours": {"train": p.train_end, "val": p.val_end - p.train_end, "test": p.panels.n_hours - p.val_end},
            "windows": {"train": int(p.train_idx.size), "val": int(p.val_idx.size), "test": int(p.test_idx.size)},
            "gamma": p.gamma,
            "loss_history": list(self.fit.history),
            "assignments": dict(zip(p.panels.station_ids, map(int, self.fit.assignments))),
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "baselines": {b: {k: v.to_dict() for k, v in m.items()} for b, m in self.baselines.items()},
            "notes": {
                "metric_scale": "'normalized' is standardised kWh (training mean/std); 'raw' is kWh",
                "mase_reference": "one-step (1 h) naive forecast on the training series, regardless of LAG_HOURS",
            },
        }


def run_experiment(config: ExperimentConfig, raw: PanelSet, with_baselines: bool = True) -> RunResult:
    prep = prepare(raw, config)
    fitted = fit(config, prep)
    if prep.test_idx.size == 0:
        raise ValueError("no test windows; the series is too short")
    pred = predict_windows(fitted.params, prep, fitted.assignments, prep.test_idx)
    metrics = score(prep, prep.windows.targets[prep.test_idx], pred)
    base = run_baselines(prep) if with_baselines else {}
    return RunResult(config, prep, fitted, pred, metrics, base)


# -- artefacts ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: ModelParams
    scaler: Scaler
    station_ids: list[str]
    assignments: np.ndarray
    a_geo: AdjacencyMatrix
    a_dem: AdjacencyMatrix
    dem_names: tuple[str, ...]
    geo_names: tuple[str, ...]

    @classmethod
    def from_run(cls, run: RunResult) -> "Checkpoint":
        p = run.prep
        return cls(run.config, run.fit.params, p.scaler, list(p.panels.station_ids), run.fit.assignments,
                   p.a_geo, p.a_dem, p.panels.dem_names, p.panels.geo_names)

    def save(self, path) -> None:
        meta = {
            "config": self.config.to_mapping(),
            "scaler": self.scaler.to_dict(),
            "station_ids": self.station_ids,
            "assignments": [int(a) for a in self.assignments],
            "dem_names": list(self.dem_names),
            "geo_names": list(self.geo_names),
        }
        arrays = {f"param:{k}": v for k, v in self.params.to_arrays().items()}
        with Path(path).open("wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), a_geo=self.a_geo.values, a_dem=self.a_dem.values, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
            a_geo, a_dem = z["a_geo"], z["a_dem"]
        config = ExperimentConfig.from_mapping(meta["config"])
        return cls(
            config,
            ModelParams.from_arrays(arrays, config.model_kind),
            Scaler.from_dict(meta["scaler"]),
            meta["station_ids"],
            np.asarray(meta["assignments"], dtype=int),
            AdjacencyMatrix(a_geo, "geo", "normalized"),
            AdjacencyMatrix(a_dem, "dem", "normalized"),
            tuple(meta["dem_names"]),
            tuple(meta["geo_names"]),
        )


def save_run(run: RunResult, out_dir) -> dict[str, Path]:
    """Write ``run_<hash>.json``, ``model_<hash>.npz`` and ``regions_<hash>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = run.config.config_hash()
    paths = {
        "report": out / f"run_{h}.json",
        "checkpoint": out / f"model_{h}.npz",
        "regions": out / f"regions_{h}.csv",
    }
    paths["report"].write_text(json.dumps(run.report(), indent=2) + "\n", encoding="utf-8")
    Checkpoint.from_run(run).save(paths["checkpoint"])
    write_assignments_csv(run.prep.panels.station_ids, run.fit.assignments, paths["regions"])
    return paths


def forecast(ckpt: Checkpoint, raw: PanelSet, horizon: int = 1) -> pd.DataFrame:
    """kWh forecasts from the last ``horizon`` windows of ``raw``.

    Each row is the forecast made at the end of a window for the hour
    ``LAG_HOURS`` later. Columns: ``station_id, timestamp, kwh_pred``.
    """
    if list(raw.station_ids) != list(ckpt.station_ids):
        raise ValueError("checkpoint and panels cover different stations")
    if tuple(raw.dem_names) != tuple(ckpt.dem_names) or tuple(raw.geo_names) != tuple(ckpt.geo_names):
        raise ValueError("checkpoint and panels have different feature columns")
    cfg = ckpt.config
    panels = apply_toggles(ckpt.scaler.transform(raw), cfg)
    if horizon < 1 or panels.n_hours - horizon < cfg.seq_length - 1:
        raise ValueError(f"horizon must be in [1, {panels.n_hours - cfg.seq_length + 1}]")
    ends = np.arange(panels.n_hours - horizon, panels.n_hours)
    x = window_inputs_ending_at(panels, cfg.seq_length, ends)
    geo = np.broadcast_to(panels.geo, (len(ends), cfg.seq_length) + panels.geo.shape)
    z = forward(ckpt.params, geo, x, ckpt.a_geo, ckpt.a_dem, ckpt.assignments, ckpt.scaler.zero_kwh).value
    kwh = np.maximum(ckpt.scaler.unscale_target(z), 0.0)
    stamps = panels.hours[ends] + pd.Timedelta(hours=cfg.lag_hours)
    n = len(panels)
    return pd.DataFrame(
        {
            "station_id": np.tile(np.asarray(panels.station_ids, dtype=object), len(ends)),
            "timestamp": np.repeat(stamps.strftime("%Y-%m-%dT%H:%M:%SZ").to_numpy(), n),
            "kwh_pred": kwh.reshape(-1),
        }
    )

