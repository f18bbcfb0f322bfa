"""Ablation grid: expand domains, run cells (optionally in parallel), tabulate."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import PanelSet
from .train import GRID_DOMAINS, ExperimentConfig, run_experiment

log = logging.getLogger(__name__)

COLUMNS = ("Model", "L", "C", "ALPHA", "SL", "MAE", "MSE", "RMSE", "SMAPE")
_METRICS = (("MAE", "mae"), ("MSE", "mse"), ("RMSE", "rmse"), ("SMAPE", "smape_percent"))
# grid domain key -> config field, in the order cells are enumerated
_AXES = (("MODEL", "model_kind"), ("LAG_HOURS", "lag_hours"), ("NUM_CLUSTERS", "num_clusters"),
         ("ALPHA", "alpha"), ("SEQ_LENGTH", "seq_length"))


def expand_grid(domains: dict | None = None, base: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    """Cartesian product of the domains over ``base``.

    ``domains`` maps grid keys (``MODEL, LAG_HOURS, NUM_CLUSTERS, ALPHA,
    SEQ_LENGTH``, case-insensitive) to value lists; missing keys take the
    default grid. Order is model, lag, clusters, alpha, sequence length.
    """
    base = base or ExperimentConfig()
    given = {str(k).upper(): v for k, v in (domains or {}).items()}
    unknown = set(given) - {k for k, _ in _AXES}
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    lists = []
    for key, name in _AXES:
        values = given.get(key, GRID_DOMAINS[name])
        if isinstance(values, (str, int, float)):
            values = [values]
        if len(values) == 0:
            raise ValueError(f"grid domain {key} is empty")
        lists.append(list(values))
    return [replace(base, **dict(zip((n for _, n in _AXES), combo))) for combo in itertools.product(*lists)]


def _row(config: ExperimentConfig, metrics: dict | None) -> dict:
    row = {"Model": config.model_kind, "L": config.lag_hours, "C": config.num_clusters,
           "ALPHA": config.alpha, "SL": config.seq_length}
    for col, key in _METRICS:
        row[col] = math.nan if metrics is None else getattr(metrics, key)
    return row


def run_cell(config: ExperimentConfig, panels: PanelSet) -> dict:
    """One grid row; failures become NaN metrics rather than exceptions."""
    try:
        run = run_experiment(config, panels, with_baselines=False)
    except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the grid
        log.error("grid cell %s failed: %s", config.config_hash(), exc)
        return _row(config, None) | {"error": str(exc)}
    return _row(config, run.metrics["normalized"])


def _cell(args):
    return run_cell(*args)


def grid_search(configs: Sequence[ExperimentConfig], panels: PanelSet, jobs: int = 1) -> list[dict]:
    """Rows in the order of ``configs``, regardless of ``jobs``."""
    if not configs:
        raise ValueError("grid is empty")
    tasks = [(c, panels) for c in configs]
    if jobs <= 1:
        return [_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell, tasks))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_results_csv(rows: Iterable[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])


def top_k_per_model(rows: Iterable[dict], k: int = 5) -> dict[str, list[dict]]:
    """Best ``k`` rows per model by MAE; failed (NaN) rows are excluded."""
    out: dict[str, list[dict]] = {}
    for r in rows:
        if not math.isnan(r["MAE"]):
            out.setdefault(r["Model"], []).append(r)
    return {m: sorted(rs, key=lambda r: r["MAE"])[:k] for m, rs in out.items()}
