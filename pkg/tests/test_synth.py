import json

import numpy as np
import pandas as pd
import pytest

from conftest import source_paths
from oracles import lstsq_r2
from twgcn.baselines import persistence
from twgcn.ingest import ingest
from twgcn.synth import SynthConfig, generate, write_sources
from twgcn.train import ExperimentConfig, make_windows

SMALL = dict(n_stations=6, n_hours=72, n_tmcs=8)


def test_degenerate_config_gives_constant_demand(tmp_path):
    cfg = SynthConfig(**SMALL, noise_std=0.0, diurnal_amplitude=0.0, weekly_amplitude=0.0, traffic_coupling=0.0,
                      cold_coupling=0.0, poi_effect=0.0)
    write_sources(cfg, tmp_path)
    panels, _ = ingest(*source_paths(tmp_path))
    assert panels.target.shape == (72, 6)
    assert np.all(panels.target == 5.0)


def test_reruns_are_byte_identical(tmp_path):
    a = write_sources(SynthConfig(**SMALL), tmp_path / "a")
    b = write_sources(SynthConfig(**SMALL), tmp_path / "b")
    assert a == b
    for name in ("sessions", "traffic", "weather", "poi"):
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == SynthConfig(**SMALL).config_hash()


def test_seed_changes_output():
    a = generate(SynthConfig(**SMALL, seed=1))["sessions"]
    b = generate(SynthConfig(**SMALL, seed=2))["sessions"]
    assert not a.equals(b)


def test_ingest_keeps_every_row_and_value(small_synth_dir):
    panels, report = ingest(*source_paths(small_synth_dir))
    for src in ("sessions", "traffic", "weather", "poi"):
        assert report["sources"][src]["rows_dropped"] == 0
    assert report["panels"]["hours_dropped"] == 0
    sessions = pd.read_csv(small_synth_dir / "sessions.csv", float_precision="round_trip")
    hour = pd.to_datetime(sessions["start_date_time"], utc=True).dt.floor("h")
    grid = sessions.assign(hour=hour).pivot_table(index="hour", columns="station_id", values="energy_kwh",
                                                  aggfunc="sum", fill_value=0.0)
    grid = grid.reindex(index=panels.hours, columns=panels.station_ids, fill_value=0.0)
    assert np.array_equal(grid.to_numpy(), panels.target)


def test_persistence_error_is_positive_and_finite(small_panels):
    w = make_windows(small_panels, 4, 1)
    rmse = np.sqrt(np.mean((persistence(w.inputs) - w.targets) ** 2))
    assert np.isfinite(rmse) and rmse > 0


def test_planted_signal_is_recoverable(tmp_path):
    # no noise: hour-of-day and local congestion explain nearly all of each station's demand
    write_sources(SynthConfig(noise_std=0.0), tmp_path)
    panels, _ = ingest(*source_paths(tmp_path))
    hod = np.eye(24)[panels.hours.hour.to_numpy()]
    cval = panels.dem_names.index("cvalue")
    r2 = [lstsq_r2(np.column_stack([hod, panels.dem[:, i, cval]]), panels.target[:, i]) for i in range(len(panels))]
    assert min(r2) >= 0.99


@pytest.mark.parametrize("bad", [{"n_stations": 0}, {"noise_std": -1.0}, {"n_hours": 0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="stations"):
        SynthConfig.from_mapping({"stations": 3})
