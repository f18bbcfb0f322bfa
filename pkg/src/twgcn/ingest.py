"""Raw CSV sources to aligned hourly station panels.

Four sources feed the pipeline:

* sessions: ``station_id, station_latitude, station_longitude, start_date_time, energy_kwh``
* traffic: ``tmc_id, start_date_time, latitude, longitude`` plus the TMC metrics
* weather: ``sensor_id, start_date_time, latitude, longitude`` plus the weather metrics
* poi: ``category, latitude, longitude`` (category is one of :data:`POI_CATEGORIES`)

Headers are matched case-insensitively and in any order. All timestamps are
converted to UTC.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .graph import haversine_km

log = logging.getLogger(__name__)

POI_CATEGORIES = (
    "supermarket",
    "retail_shopping",
    "higher_educ",
    "school",
    "park",
    "restaurant",
    "police",
    "library",
    "hospital",
)
POI_FLAGS = tuple(f"has_{c}" for c in POI_CATEGORIES)

TRAFFIC_FEATURES = (
    "speed",
    "historical_average_speed",
    "reference_speed",
    "speed_deviation",
    "delay_per_mile",
    "travel_time_seconds",
    "tti",
    "cvalue",
    "confidence_score",
    "is_congested",
)
WEATHER_FEATURES = ("pressure", "temperature", "humidity", "precip", "wind_speed")
CALENDAR_FEATURES = ("hour_sin", "hour_cos", "dow_sin", "dow_cos")
DEM_FEATURES = TRAFFIC_FEATURES + WEATHER_FEATURES + CALENDAR_FEATURES
GEO_FEATURES = POI_FLAGS + ("station_latitude", "station_longitude")

SCHEMAS = {
    "sessions": ("station_id", "station_latitude", "station_longitude", "start_date_time", "energy_kwh"),
    "traffic": ("tmc_id", "start_date_time", "latitude", "longitude") + TRAFFIC_FEATURES,
    "weather": ("sensor_id", "start_date_time", "latitude", "longitude") + WEATHER_FEATURES,
    "poi": ("category", "latitude", "longitude"),
}
_ID_COLUMNS = {"station_id", "tmc_id", "sensor_id", "category"}

MAX_FILL_HOURS = 3


class SchemaError(ValueError):
    """A source file is missing a required column."""


class Sources(NamedTuple):
    sessions: pd.DataFrame
    traffic: pd.DataFrame
    weather: pd.DataFrame
    poi: pd.DataFrame


def _aligned_copy(a: np.ndarray, align: int = 64) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    buf = np.empty(a.nbytes + align, dtype=np.uint8)
    start = -buf.ctypes.data % align
    out = buf[start : start + a.nbytes].view(np.float64).reshape(a.shape)
    out[...] = a
    return out


def _parse_bool(col: pd.Series) -> pd.Series:
    mapping = {"true": 1.0, "false": 0.0, "1": 1.0, "0": 0.0, "1.0": 1.0, "0.0": 0.0, "yes": 1.0, "no": 0.0}
    return col.astype(str).str.strip().str.lower().map(mapping)


def _parse_float(col: pd.Series) -> pd.Series:
    # python's float() rounds correctly; pandas' fast parser can be off by an ulp
    def conv(v: str) -> float:
        try:
            return float(v)
        except ValueError:
            return np.nan

    return col.map(conv).astype(np.float64)


def _read_source(name: str, path) -> tuple[pd.DataFrame, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{name} source not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    raw.columns = [c.strip().lower() for c in raw.columns]
    for col in SCHEMAS[name]:
        if col not in raw.columns:
            raise SchemaError(f"{name} source {path} is missing required column '{col}'")
    df = raw[list(SCHEMAS[name])].copy()
    n_read = len(df)

    ok = pd.Series(True, index=df.index)
    for col in SCHEMAS[name]:
        if col in _ID_COLUMNS:
            df[col] = df[col].str.strip()
            ok &= df[col] != ""
        elif col == "start_date_time":
            df[col] = pd.to_datetime(df[col], utc=True, errors="coerce", format="mixed")
            ok &= df[col].notna()
        elif col == "is_congested":
            df[col] = _parse_bool(df[col])
            ok &= df[col].notna()
        else:
            df[col] = _parse_float(df[col])
            ok &= np.isfinite(df[col])

    lat = "station_latitude" if name == "sessions" else "latitude"
    lon = "station_longitude" if name == "sessions" else "longitude"
    ok &= df[lat].between(-90, 90) & df[lon].between(-180, 180)
    if name == "sessions":
        ok &= df["energy_kwh"] >= 0
    elif name == "traffic":
        ok &= df["reference_speed"] > 0
    elif name == "weather":
        ok &= df["humidity"].between(0, 100)
    elif name == "poi":
        df["category"] = df["category"].str.lower()

    kept = df[ok].reset_index(drop=True)
    report = {"rows_read": n_read, "rows_kept": len(kept), "rows_dropped": n_read - len(kept)}
    if n_read and report["rows_dropped"] > 0.5 * n_read:
        report["warning"] = f"more than 50% of {name} rows dropped"
        log.warning("%s: %d of %d rows dropped", name, report["rows_dropped"], n_read)
    return kept, report


def parse_sources(sessions, traffic, weather, poi) -> tuple[Sources, dict]:
    """Read and validate the four CSV sources.

    Rows with a missing or unparseable value in any schema column, or with a
    value outside its valid range, are dropped and counted in the returned
    report.
    """
    frames, report = {}, {}
    for name, path in zip(SCHEMAS, (sessions, traffic, weather, poi)):
        frames[name], report[name] = _read_source(name, path)
    return Sources(**frames), report


def match_nearest(stations, sensors, sensor_ids: Sequence[str], k: int) -> list[list[str]]:
    """The ``k`` closest sensors to each station, nearest first.

    Equal distances are ordered by ascending sensor id.
    """
    sensors = np.asarray(sensors, dtype=np.float64).reshape(-1, 2)
    stations = np.asarray(stations, dtype=np.float64).reshape(-1, 2)
    if sensors.shape[0] == 0:
        raise ValueError("match_nearest: no sensors")
    if not 1 <= k <= sensors.shape[0]:
        raise ValueError(f"match_nearest: k={k} but only {sensors.shape[0]} sensors")
    ids = np.asarray([str(s) for s in sensor_ids])
    id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    dist = np.asarray(
        haversine_km(stations[:, None, 0], stations[:, None, 1], sensors[None, :, 0], sensors[None, :, 1])
    ).reshape(stations.shape[0], sensors.shape[0])
    out = []
    for row in dist:
        order = np.lexsort((id_rank, row))[:k]
        out.append([str(ids[j]) for j in order])
    return out


# -- panels ---------------------------------------------------------------


@dataclass
class StationPanel:
    station_id: str
    hours: pd.DatetimeIndex
    target_kwh: np.ndarray
    dem_features: np.ndarray
    geo_features: np.ndarray


@dataclass
class PanelSet:
    """All stations on one shared, contiguous hourly index.

    ``target`` is (T, N), ``dem`` is (T, N, F_dem), ``geo`` is (N, F_geo).
    """

    station_ids: list[str]
    coords: np.ndarray
    hours: pd.DatetimeIndex
    target: np.ndarray
    dem: np.ndarray
    geo: np.ndarray
    dem_names: tuple[str, ...] = DEM_FEATURES
    geo_names: tuple[str, ...] = GEO_FEATURES
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.station_ids)

    def __iter__(self) -> Iterator[StationPanel]:
        for i, sid in enumerate(self.station_ids):
            yield StationPanel(sid, self.hours, self.target[:, i], self.dem[:, i], self.geo[i])

    @property
    def n_hours(self) -> int:
        return len(self.hours)

    def aligned(self) -> "PanelSet":
        """Copy with every array on a 64-byte boundary.

        numpy's SIMD reductions can round differently depending on where the
        data starts, so an unpickled copy (e.g. in a worker process) would
        otherwise give results that differ in the last bit.
        """
        return replace(self, coords=_aligned_copy(self.coords), target=_aligned_copy(self.target),
                       dem=_aligned_copy(self.dem), geo=_aligned_copy(self.geo))

    def select_stations(self, idx) -> "PanelSet":
        idx = np.asarray(idx)
        return replace(
            self,
            station_ids=[self.station_ids[i] for i in idx],
            coords=self.coords[idx],
            target=self.target[:, idx],
            dem=self.dem[:, idx],
            geo=self.geo[idx],
        )


@dataclass(frozen=True)
class JoinConfig:
    k_traffic: int = 5
    poi_radius_m: float = 500.0
    max_fill_hours: int = MAX_FILL_HOURS
    min_hours: int = 2


def poi_flags(coords, poi: pd.DataFrame, radius_m: float = 500.0) -> np.ndarray:
    """(N, 9) boolean matrix: a POI of that category lies within ``radius_m``."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    flags = np.zeros((coords.shape[0], len(POI_CATEGORIES)), dtype=bool)
    for c, cat in enumerate(POI_CATEGORIES):
        pts = poi.loc[poi["category"] == cat, ["latitude", "longitude"]].to_numpy(dtype=np.float64)
        if len(pts) == 0:
            continue
        d = haversine_km(coords[:, None, 0], coords[:, None, 1], pts[None, :, 0], pts[None, :, 1])
        flags[:, c] = (np.asarray(d) * 1000.0 <= radius_m).any(axis=1)
    return flags


def _hourly(frame: pd.DataFrame, key: str, cols: Sequence[str], hours: pd.DatetimeIndex, keys: Sequence[str]) -> np.ndarray:
    """Mean of ``cols`` per (hour, key) as a (T, K, F) array with NaN gaps."""
    f = frame.assign(hour=frame["start_date_time"].dt.floor("h"))
    g = f.groupby(["hour", key], sort=True)[list(cols)].mean()
    full = pd.MultiIndex.from_product([hours, list(keys)], names=["hour", key])
    return g.reindex(full).to_numpy(dtype=np.float64).reshape(len(hours), len(keys), len(cols))


def _calendar(hours: pd.DatetimeIndex) -> np.ndarray:
    h = hours.hour.to_numpy() + hours.minute.to_numpy() / 60.0
    d = hours.dayofweek.to_numpy() + h / 24.0
    return np.stack(
        [np.sin(2 * np.pi * h / 24), np.cos(2 * np.pi * h / 24), np.sin(2 * np.pi * d / 7), np.cos(2 * np.pi * d / 7)],
        axis=1,
    )


def _longest_true_run(mask: np.ndarray) -> tuple[int, int]:
    best, start, best_span = (0, 0), None, 0
    for i, v in enumerate(np.append(mask, False)):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start > best_span:
                best, best_span = (start, i), i - start
            start = None
    return best


def build_panels(sources: Sources, join: JoinConfig | None = None) -> tuple[PanelSet, dict]:
    """Join sessions, traffic, weather and POIs into one hourly :class:`PanelSet`.

    Energy is summed per station-hour (hours without sessions are 0 kWh).
    Traffic features are the mean over the ``k_traffic`` nearest TMCs, and
    weather comes from the nearest sensor. Feature gaps are forward-filled
    for at most ``max_fill_hours``; the panel keeps the longest contiguous
    block of hours where every station has every feature. Values are raw
    (not standardised); see :func:`fit_scaler`.
    """
    join = join or JoinConfig()
    sess, traffic, weather, poi = sources
    if sess.empty:
        raise ValueError("no usable charging sessions")

    stations = (
        sess.groupby("station_id", sort=True)[["station_latitude", "station_longitude"]].first()
    )
    station_ids = [str(s) for s in stations.index]
    coords = stations.to_numpy(dtype=np.float64)

    s_hour = sess["start_date_time"].dt.floor("h")
    hours = pd.date_range(s_hour.min(), s_hour.max(), freq="h")
    kwh = (
        sess.assign(hour=s_hour)
        .groupby(["hour", "station_id"])["energy_kwh"]
        .sum()
        .unstack("station_id")
        .reindex(index=hours, columns=station_ids)
    )
    has_session = kwh.notna().to_numpy()
    target = kwh.fillna(0.0).to_numpy(dtype=np.float64)

    n, t = len(station_ids), len(hours)
    if traffic.empty or weather.empty:
        raise ValueError("traffic and weather sources must not be empty")
    tmcs = traffic.groupby("tmc_id", sort=True)[["latitude", "longitude"]].first()
    tmc_ids = [str(s) for s in tmcs.index]
    k_traffic = min(join.k_traffic, len(tmc_ids))
    near_tmc = match_nearest(coords, tmcs.to_numpy(), tmc_ids, k_traffic)
    tmc_pos = {s: i for i, s in enumerate(tmc_ids)}
    tr = _hourly(traffic, "tmc_id", TRAFFIC_FEATURES, hours, tmc_ids)

    sensors = weather.groupby("sensor_id", sort=True)[["latitude", "longitude"]].first()
    sensor_ids = [str(s) for s in sensors.index]
    near_ws = match_nearest(coords, sensors.to_numpy(), sensor_ids, 1)
    ws_pos = {s: i for i, s in enumerate(sensor_ids)}
    we = _hourly(weather, "sensor_id", WEATHER_FEATURES, hours, sensor_ids)

    dyn = np.empty((t, n, len(TRAFFIC_FEATURES) + len(WEATHER_FEATURES)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)  # all-NaN slices stay NaN
        for i in range(n):
            idx = [tmc_pos[s] for s in near_tmc[i]]
            dyn[:, i, : len(TRAFFIC_FEATURES)] = np.nanmean(tr[:, idx, :], axis=1)
            dyn[:, i, len(TRAFFIC_FEATURES) :] = we[:, ws_pos[near_ws[i][0]], :]

    filled = np.empty_like(dyn)
    for i in range(n):
        filled[:, i] = pd.DataFrame(dyn[:, i]).ffill(limit=join.max_fill_hours).to_numpy()
    valid = np.isfinite(filled).all(axis=(1, 2))
    lo, hi = _longest_true_run(valid)
    dropped_hours = t - (hi - lo)
    if dropped_hours:
        log.info("dropping %d hours outside the longest gap-free block", dropped_hours)
    if hi - lo < join.min_hours:
        raise ValueError(f"only {hi - lo} usable hours after cleaning; need {join.min_hours}")

    hours = hours[lo:hi]
    target = target[lo:hi]
    dem = np.concatenate([filled[lo:hi], np.repeat(_calendar(hours)[:, None, :], n, axis=1)], axis=2)
    geo = np.concatenate([poi_flags(coords, poi, join.poi_radius_m).astype(np.float64), coords], axis=1)

    keep = has_session[lo:hi].any(axis=0)
    excluded = [s for s, k in zip(station_ids, keep) if not k]
    for s in excluded:
        log.warning("station %s has no sessions in the kept window; excluded", s)
    panels = PanelSet(station_ids, coords, hours, target, dem, geo)
    if excluded:
        panels = panels.select_stations(np.flatnonzero(keep))
    if len(panels) == 0:
        raise ValueError("no stations left after cleaning")
    report = {
        "stations_kept": len(panels),
        "stations_excluded": excluded,
        "hours_kept": int(hi - lo),
        "hours_dropped": int(dropped_hours),
        "first_hour": hours[0].isoformat(),
        "last_hour": hours[-1].isoformat(),
        "k_traffic": k_traffic,
        "poi_radius_m": join.poi_radius_m,
    }
    return panels, report


def ingest(sessions, traffic, weather, poi, join: JoinConfig | None = None) -> tuple[PanelSet, dict]:
    """parse_sources + build_panels; the report merges both stages."""
    sources, report = parse_sources(sessions, traffic, weather, poi)
    panels, panel_report = build_panels(sources, join)
    return panels, {"sources": report, "panels": panel_report}


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- standardisation ------------------------------------------------------


def split_hours(n_hours: int, fractions=(0.7, 0.15, 0.15)) -> tuple[int, int]:
    """Chronological split boundaries ``(train_end, val_end)`` in hours."""
    train_end = int(round(n_hours * fractions[0]))
    val_end = int(round(n_hours * (fractions[0] + fractions[1])))
    return train_end, val_end


def _moments(x: np.ndarray, axis) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=axis)
    sd = x.std(axis=axis)
    # constant columns map to zeros
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 0.0)
    return mu, sd


@dataclass
class Scaler:
    """Standardisation statistics; dynamic ones come from training hours only."""

    dem_mean: np.ndarray
    dem_std: np.ndarray
    geo_mean: np.ndarray
    geo_std: np.ndarray
    target_mean: float
    target_std: float
    train_hours: int = 0

    @staticmethod
    def _apply(x, mu, sd):
        safe = np.where(sd > 0, sd, 1.0)
        return np.where(sd > 0, (x - mu) / safe, 0.0)

    def transform(self, panels: PanelSet) -> PanelSet:
        if panels.normalized:
            raise ValueError("panels are already normalized")
        return replace(
            panels,
            target=self.scale_target(panels.target),
            dem=self._apply(panels.dem, self.dem_mean, self.dem_std),
            geo=self._apply(panels.geo, self.geo_mean, self.geo_std),
            normalized=True,
        )

    def scale_target(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y - self.target_mean) / self.target_unit

    def unscale_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_unit + self.target_mean

    @property
    def target_unit(self) -> float:
        return self.target_std if self.target_std > 0 else 1.0

    @property
    def zero_kwh(self) -> float:
        """0 kWh expressed on the standardised target scale."""
        return -self.target_mean / self.target_unit

    def to_dict(self) -> dict:
        return {
            "dem_mean": self.dem_mean.tolist(),
            "dem_std": self.dem_std.tolist(),
            "geo_mean": self.geo_mean.tolist(),
            "geo_std": self.geo_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "train_hours": self.train_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            np.asarray(d["dem_mean"]),
            np.asarray(d["dem_std"]),
            np.asarray(d["geo_mean"]),
            np.asarray(d["geo_std"]),
            float(d["target_mean"]),
            float(d["target_std"]),
            int(d.get("train_hours", 0)),
        )


def fit_scaler(panels: PanelSet, train_hours: int) -> Scaler:
    """Fit standardisation on hours ``[0, train_hours)``.

    Dynamic features and the target are pooled over those hours and all
    stations; static geo features are standardised across stations.
    """
    if not 1 <= train_hours <= panels.n_hours:
        raise ValueError(f"train_hours must be in [1, {panels.n_hours}], got {train_hours}")
    dem_mu, dem_sd = _moments(panels.dem[:train_hours].reshape(-1, panels.dem.shape[-1]), axis=0)
    geo_mu, geo_sd = _moments(panels.geo, axis=0)
    y = panels.target[:train_hours]
    y_mu, y_sd = _moments(y.ravel(), axis=0)
    return Scaler(dem_mu, dem_sd, geo_mu, geo_sd, float(y_mu), float(y_sd), train_hours)


# -- bundle I/O -----------------------------------------------------------


def save_panels(panels: PanelSet, out_dir) -> None:
    """Write ``panels.csv`` (long, hourly) and ``stations.csv`` (static) into ``out_dir``."""
    if panels.normalized:
        raise ValueError("save raw panels; normalisation is re-fit per run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t, n = panels.target.shape
    long = pd.DataFrame(
        {
            "station_id": np.tile(np.asarray(panels.station_ids, dtype=object), t),
            "start_date_time": np.repeat(panels.hours.strftime("%Y-%m-%dT%H:%M:%SZ").to_numpy(), n),
            "energy_kwh": panels.target.reshape(-1),
        }
    )
    for f, name in enumerate(panels.dem_names):
        long[name] = panels.dem[:, :, f].reshape(-1)
    long.to_csv(out / "panels.csv", index=False, float_format="%.17g")
    st = pd.DataFrame(panels.geo, columns=list(panels.geo_names))
    st.insert(0, "station_id", panels.station_ids)
    st.to_csv(out / "stations.csv", index=False, float_format="%.17g")


def load_panels(in_dir) -> PanelSet:
    src = Path(in_dir)
    for fname in ("panels.csv", "stations.csv"):
        if not (src / fname).is_file():
            raise FileNotFoundError(f"panel bundle is missing {src / fname}")
    st = pd.read_csv(src / "stations.csv", dtype={"station_id": str}, float_precision="round_trip")
    long = pd.read_csv(src / "panels.csv", dtype={"station_id": str}, float_precision="round_trip")
    ids = st["station_id"].tolist()
    geo_names = tuple(c for c in st.columns if c != "station_id")
    dem_names = tuple(c for c in long.columns if c not in ("station_id", "start_date_time", "energy_kwh"))
    hours = pd.DatetimeIndex(pd.to_datetime(long["start_date_time"].unique(), utc=True))
    t, n = len(hours), len(ids)
    if len(long) != t * n or long["station_id"].iloc[:n].tolist() != ids:
        raise ValueError(f"{src / 'panels.csv'} is not a complete station-hour grid")
    return PanelSet(
        station_ids=ids,
        coords=st[["station_latitude", "station_longitude"]].to_numpy(dtype=np.float64),
        hours=hours,
        target=long["energy_kwh"].to_numpy(dtype=np.float64).reshape(t, n),
        dem=long[list(dem_names)].to_numpy(dtype=np.float64).reshape(t, n, len(dem_names)),
        geo=st[list(geo_names)].to_numpy(dtype=np.float64),
        dem_names=dem_names,
        geo_names=geo_names,
    )

