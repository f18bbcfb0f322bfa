"""Seeded synthetic stand-in for the four raw sources.

Stations sit in a few spatial blobs around Tennessee cities. Hourly demand is

    kwh = relu(base_i + diurnal + weekly + traffic * congestion_i + cold * relu(10 - temp_i) + noise)

where ``congestion_i`` is the mean congestion of the station's nearest TMCs
and ``temp_i`` is the temperature at its nearest weather sensor, so the
signal the model should recover is written straight into the files it
reads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import POI_CATEGORIES, TRAFFIC_FEATURES, WEATHER_FEATURES, match_nearest

CITIES = (
    (36.1627, -86.7816),  # Nashville
    (35.9606, -83.9207),  # Knoxville
    (35.1495, -90.0490),  # Memphis
    (35.0456, -85.3097),  # Chattanooga
)
START = "2024-01-01T00:00:00Z"


@dataclass(frozen=True)
class SynthConfig:
    n_stations: int = 20
    n_hours: int = 28 * 24
    n_tmcs: int = 30
    n_weather_sensors: int = 4
    seed: int = 7
    noise_std: float = 0.3
    base: float = 5.0
    diurnal_amplitude: float = 3.0
    weekly_amplitude: float = 0.3
    traffic_coupling: float = 1.5
    cold_coupling: float = 0.05
    poi_effect: float = 0.4
    phase_jitter_h: float = 0.5
    n_blobs: int = 4
    blob_radius_km: float = 6.0
    k_traffic: int = 5

    def __post_init__(self):
        for name in ("n_stations", "n_hours", "n_tmcs", "n_weather_sensors", "n_blobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @classmethod
    def from_mapping(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def _offset(rng, center, radius_km, size):
    """Points scattered around ``center`` with an isotropic ``radius_km`` spread."""
    dlat = rng.normal(0, radius_km / 111.0, size)
    dlon = rng.normal(0, radius_km / (111.0 * np.cos(np.radians(center[0]))), size)
    return np.column_stack([center[0] + dlat, center[1] + dlon])


def _congestion_profile(hours: pd.DatetimeIndex) -> np.ndarray:
    h = hours.hour.to_numpy()
    weekday = hours.dayofweek.to_numpy() < 5
    rush = np.exp(-0.5 * ((h - 8) / 1.5) ** 2) + np.exp(-0.5 * ((h - 17) / 2.0) ** 2)
    return np.where(weekday, 0.15 + 0.7 * rush, 0.1 + 0.25 * rush)


def generate(cfg: SynthConfig | None = None) -> dict[str, pd.DataFrame]:
    """The four raw sources as DataFrames keyed ``sessions, traffic, weather, poi``."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    hours = pd.date_range(START, periods=cfg.n_hours, freq="h")
    t = np.arange(cfg.n_hours)
    n_blobs = min(cfg.n_blobs, len(CITIES), cfg.n_stations)

    blob = np.arange(cfg.n_stations) % n_blobs
    st = np.vstack([_offset(rng, CITIES[b], cfg.blob_radius_km, 1) for b in blob])
    station_ids = [f"ST{i:03d}" for i in range(cfg.n_stations)]

    # TMCs: round-robin over stations so every station has nearby road segments
    anchor = np.arange(cfg.n_tmcs) % cfg.n_stations
    tmc = np.vstack([_offset(rng, st[a], 1.5, 1) for a in anchor])
    tmc_ids = [f"TMC{j:04d}" for j in range(cfg.n_tmcs)]
    tmc_ref = rng.uniform(45, 70, cfg.n_tmcs)
    profile = _congestion_profile(hours)
    cong = np.empty((cfg.n_hours, cfg.n_tmcs))
    ar = np.zeros(cfg.n_tmcs)
    for i in range(cfg.n_hours):
        ar = 0.8 * ar + rng.normal(0, 0.03, cfg.n_tmcs)
        cong[i] = profile[i] + ar
    cong = np.clip(cong, 0.0, 1.0)

    ws_blob = np.arange(cfg.n_weather_sensors) % n_blobs
    ws = np.vstack([_offset(rng, CITIES[b], 3.0, 1) for b in ws_blob])
    ws_ids = [f"WX{j:02d}" for j in range(cfg.n_weather_sensors)]
    hod = hours.hour.to_numpy()
    temp = (
        6.0
        + 6.0 * np.sin(2 * np.pi * (hod - 9) / 24)[:, None]
        + 0.1 * (t / 24.0)[:, None]
        + rng.normal(0, 0.5, (cfg.n_hours, cfg.n_weather_sensors))
    )

    flags = rng.random((cfg.n_stations, len(POI_CATEGORIES))) < 0.5
    poi_rows = []
    for i in range(cfg.n_stations):
        for c, cat in enumerate(POI_CATEGORIES):
            if flags[i, c]:
                p = _offset(rng, st[i], 0.12, 1)[0]
                poi_rows.append((cat, p[0], p[1]))
    for c, cat in enumerate(POI_CATEGORIES):
        # distractors well outside any buffer
        for p in _offset(rng, CITIES[c % n_blobs], 25.0, 3):
            poi_rows.append((cat, p[0], p[1]))

    near = match_nearest(st, tmc, tmc_ids, min(cfg.k_traffic, cfg.n_tmcs))
    pos = {s: j for j, s in enumerate(tmc_ids)}
    local_cong = np.stack([cong[:, [pos[s] for s in near[i]]].mean(axis=1) for i in range(cfg.n_stations)], axis=1)
    near_ws = match_nearest(st, ws, ws_ids, 1)
    wpos = {s: j for j, s in enumerate(ws_ids)}
    local_temp = np.stack([temp[:, wpos[near_ws[i][0]]] for i in range(cfg.n_stations)], axis=1)

    peak = np.array([18.0, 13.0, 9.0, 20.0])[blob]
    phase = rng.normal(0, 1, cfg.n_stations) * cfg.phase_jitter_h
    diurnal = cfg.diurnal_amplitude * np.cos(2 * np.pi * (hod[:, None] - peak[None, :] - phase[None, :]) / 24)
    dow = hours.dayofweek.to_numpy() + hod / 24.0
    weekly = cfg.weekly_amplitude * np.sin(2 * np.pi * dow / 7)[:, None]
    base = cfg.base + cfg.poi_effect * (flags.sum(axis=1) - len(POI_CATEGORIES) / 2)
    kwh = (
        base[None, :]
        + diurnal
        + weekly
        + cfg.traffic_coupling * local_cong
        + cfg.cold_coupling * np.maximum(10.0 - local_temp, 0.0)
        + rng.normal(0, 1, (cfg.n_hours, cfg.n_stations)) * cfg.noise_std
    )
    kwh = np.maximum(kwh, 0.0)

    minute = rng.integers(0, 60, (cfg.n_hours, cfg.n_stations))
    rows = []
    for i in range(cfg.n_stations):
        for h in np.flatnonzero(kwh[:, i] > 0):
            stamp = hours[h] + pd.Timedelta(minutes=int(minute[h, i]))
            rows.append((station_ids[i], st[i, 0], st[i, 1], stamp.strftime("%Y-%m-%dT%H:%M:%SZ"), kwh[h, i]))
    sessions = pd.DataFrame(rows, columns=["station_id", "station_latitude", "station_longitude", "start_date_time", "energy_kwh"])

    stamp_str = hours.strftime("%Y-%m-%dT%H:%M:%SZ").to_numpy()
    speed = tmc_ref[None, :] * (1 - 0.6 * cong)
    hist = tmc_ref[None, :] * (1 - 0.6 * profile[:, None])
    travel = 1609.34 / (speed / 3.6)
    tti = tmc_ref[None, :] / speed
    traffic = pd.DataFrame(
        {
            "tmc_id": np.tile(tmc_ids, cfg.n_hours),
            "start_date_time": np.repeat(stamp_str, cfg.n_tmcs),
            "latitude": np.tile(tmc[:, 0], cfg.n_hours),
            "longitude": np.tile(tmc[:, 1], cfg.n_hours),
            "speed": speed.ravel(),
            "historical_average_speed": hist.ravel(),
            "reference_speed": np.tile(tmc_ref, cfg.n_hours),
            "speed_deviation": (speed - hist).ravel(),
            "delay_per_mile": (60.0 / speed - 60.0 / tmc_ref[None, :]).ravel(),
            "travel_time_seconds": travel.ravel(),
            "tti": tti.ravel(),
            "cvalue": (100 * cong).ravel(),
            "confidence_score": np.full(cfg.n_hours * cfg.n_tmcs, 30.0),
            "is_congested": (cong > 0.5).ravel(),
        },
        columns=["tmc_id", "start_date_time", "latitude", "longitude", *TRAFFIC_FEATURES],
    )

    wshape = (cfg.n_hours, cfg.n_weather_sensors)
    weather = pd.DataFrame(
        {
            "sensor_id": np.tile(ws_ids, cfg.n_hours),
            "start_date_time": np.repeat(stamp_str, cfg.n_weather_sensors),
            "latitude": np.tile(ws[:, 0], cfg.n_hours),
            "longitude": np.tile(ws[:, 1], cfg.n_hours),
            "pressure": (1013 + rng.normal(0, 4, wshape)).ravel(),
            "temperature": temp.ravel(),
            "humidity": np.clip(65 - 2 * (temp - 6) + rng.normal(0, 5, wshape), 0, 100).ravel(),
            "precip": np.maximum(rng.normal(-1.5, 1.0, wshape), 0).ravel(),
            "wind_speed": np.abs(rng.normal(6, 3, wshape)).ravel(),
        },
        columns=["sensor_id", "start_date_time", "latitude", "longitude", *WEATHER_FEATURES],
    )
    poi = pd.DataFrame(poi_rows, columns=["category", "latitude", "longitude"])
    return {"sessions": sessions, "traffic": traffic, "weather": weather, "poi": poi}


def write_sources(cfg: SynthConfig, out_dir) -> dict:
    """Write ``sessions.csv, traffic.csv, weather.csv, poi.csv`` and ``manifest.json``.

    Returns the manifest. Float columns are written with round-trip precision.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = generate(cfg)
    files = {}
    for name, df in frames.items():
        path = out / f"{name}.csv"
        df.to_csv(path, index=False, float_format="%.17g")
        files[f"{name}.csv"] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {"config": asdict(cfg), "config_hash": cfg.config_hash(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
