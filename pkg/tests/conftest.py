from __future__ import annotations

import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twgcn.ingest import DEM_FEATURES, GEO_FEATURES, PanelSet, ingest
from twgcn.synth import SynthConfig, write_sources
from twgcn.train import ExperimentConfig, run_experiment

SOURCES = ("sessions", "traffic", "weather", "poi")

# the configuration named by the end-to-end acceptance criterion
ACCEPTANCE_CONFIG = ExperimentConfig(model_kind="1DCNN", lag_hours=1, num_clusters=2, seq_length=8, alpha=0.66,
                                     num_epochs=125, seed=0)


def source_paths(d: Path) -> list[str]:
    return [str(d / f"{name}.csv") for name in SOURCES]


def traffic_row(tmc, ts, lat, lon, speed=50.0, **over):
    row = {"tmc_id": tmc, "start_date_time": ts, "latitude": lat, "longitude": lon,
           "speed": speed, "historical_average_speed": 55.0, "reference_speed": 60.0,
           "speed_deviation": speed - 55.0, "delay_per_mile": 0.1, "travel_time_seconds": 70.0,
           "tti": 1.1, "cvalue": 90.0, "confidence_score": 30.0, "is_congested": "false"}
    row.update(over)
    return row


def weather_row(sensor, ts, lat, lon, **over):
    row = {"sensor_id": sensor, "start_date_time": ts, "latitude": lat, "longitude": lon,
           "pressure": 1012.0, "temperature": 8.0, "humidity": 60.0, "precip": 0.0, "wind_speed": 4.0}
    row.update(over)
    return row


def write_toy(d: Path, sessions, traffic, weather, poi=None) -> list[str]:
    """Write small hand-made sources; each argument is a list of row dicts."""
    d.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(sessions).to_csv(d / "sessions.csv", index=False)
    pd.DataFrame(traffic).to_csv(d / "traffic.csv", index=False)
    pd.DataFrame(weather).to_csv(d / "weather.csv", index=False)
    pd.DataFrame(poi or [], columns=["category", "latitude", "longitude"]).to_csv(d / "poi.csv", index=False)
    return source_paths(d)


def toy_panels(target: np.ndarray, seed: int = 0, coords=None) -> PanelSet:
    """A raw PanelSet with the given (T, N) target and random features."""
    rng = np.random.default_rng(seed)
    t, n = target.shape
    if coords is None:
        coords = np.column_stack([36.0 + 0.01 * np.arange(n), -86.0 + 0.01 * np.arange(n)])
    return PanelSet(
        station_ids=[f"S{i}" for i in range(n)],
        coords=np.asarray(coords, dtype=np.float64),
        hours=pd.date_range("2024-03-01", periods=t, freq="h", tz="UTC"),
        target=np.asarray(target, dtype=np.float64),
        dem=rng.normal(size=(t, n, len(DEM_FEATURES))),
        geo=rng.integers(0, 2, size=(n, len(GEO_FEATURES))).astype(np.float64),
    )


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("synth")
    write_sources(SynthConfig(), d)
    return d


@pytest.fixture(scope="session")
def synth_panels(synth_dir) -> PanelSet:
    panels, _ = ingest(*source_paths(synth_dir))
    return panels


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("small")
    write_sources(SynthConfig(n_stations=10, n_hours=96, n_tmcs=12), d)
    return d


@pytest.fixture(scope="session")
def small_panels(small_synth_dir) -> PanelSet:
    panels, _ = ingest(*source_paths(small_synth_dir))
    return panels


@pytest.fixture(scope="session")
def acceptance_run(synth_panels):
    start = time.perf_counter()
    run = run_experiment(ACCEPTANCE_CONFIG, synth_panels)
    run.elapsed_s = time.perf_counter() - start
    return run


# -- acceptance summary ---------------------------------------------------

CRITERIA: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion as a PASS/FAIL line; ``info`` collects details."""
    info: dict = {}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        line = f"criterion {number:2d} FAIL  {title}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}"
        CRITERIA.append(line)
        print(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"criterion {number:2d} PASS  {title} ({time.perf_counter() - start:.1f} s{'; ' + detail if detail else ''})"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)

