"""Station graphs: great-circle proximity and demand similarity.

Two adjacency matrices are built over the same station ordering. The
geographic one links stations closer than a distance threshold; the demand
one weights every pair by ``exp(-dtw / gamma)`` where ``dtw`` is the dynamic
time warping distance between their historical kWh series.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometres between points given in degrees.

    Accepts scalars or broadcastable arrays. Raises ``ValueError`` on
    non-finite or out-of-range coordinates.
    """
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in (lat1, lon1, lat2, lon2))
    for v in (lat1, lon1, lat2, lon2):
        if not np.all(np.isfinite(v)):
            raise ValueError("haversine_km: non-finite coordinate")
    if np.any(np.abs(lat1) > 90) or np.any(np.abs(lat2) > 90):
        raise ValueError("haversine_km: latitude outside [-90, 90]")
    if np.any(np.abs(lon1) > 180) or np.any(np.abs(lon2) > 180):
        raise ValueError("haversine_km: longitude outside [-180, 180]")
    angle = _haversine_angle(lat1, lon1, lat2, lon2)
    # near-antipodal pairs lose ~1e-8 rad in 1 - a; measure to the antipode of point 2 instead
    far = angle > np.pi / 2
    if np.any(far):
        angle = np.where(far, np.pi - _haversine_angle(lat1, lon1, -lat2, lon2 + 180.0), angle)
    d = EARTH_RADIUS_KM * angle
    return float(d) if d.ndim == 0 else d


def _haversine_angle(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2 - lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2 * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


def pairwise_haversine_km(coords) -> np.ndarray:
    """N x N distance matrix for an ``(N, 2)`` array of (lat, lon)."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return np.asarray(haversine_km(c[:, None, 0], c[:, None, 1], c[None, :, 0], c[None, :, 1]))


# -- dynamic time warping -------------------------------------------------


@dataclass(frozen=True)
class DtwConfig:
    """``gamma`` is a positive float or ``"auto"`` (median off-diagonal distance)."""

    gamma: float | str = "auto"
    cost: str = "abs"  # "abs" or "sq"
    band: int | None = None
    threshold: float | None = None  # drop kernel weights below this; off by default

    def __post_init__(self):
        if self.gamma != "auto" and not (isinstance(self.gamma, (int, float)) and self.gamma > 0):
            raise ValueError(f"gamma must be positive or 'auto', got {self.gamma!r}")
        if self.cost not in ("abs", "sq"):
            raise ValueError(f"unknown DTW cost {self.cost!r}")
        if self.band is not None and self.band < 0:
            raise ValueError("band must be non-negative")


def _pointwise(a: np.ndarray, b: np.ndarray, cost: str) -> np.ndarray:
    d = a - b
    return np.abs(d) if cost == "abs" else d * d


def _dtw_batch(s: np.ndarray, t: np.ndarray, cost: str, band: int | None) -> np.ndarray:
    """DTW for P pairs at once: ``s`` is (P, n), ``t`` is (P, m).

    Fills the cumulative-cost table one anti-diagonal at a time; every cell on
    a diagonal depends only on the two previous diagonals.
    """
    p, n = s.shape
    m = t.shape[1]
    acc = np.full((p, n + 1, m + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        if band is not None:
            keep = np.abs(i - j) <= band
            i, j = i[keep], j[keep]
            if i.size == 0:
                continue
        c = _pointwise(s[:, i - 1], t[:, j - 1], cost)
        best = np.minimum(np.minimum(acc[:, i - 1, j], acc[:, i, j - 1]), acc[:, i - 1, j - 1])
        acc[:, i, j] = c + best
    return acc[:, n, m]


def dtw_distance(s: Sequence[float], t: Sequence[float], cfg: DtwConfig | None = None) -> float:
    """Minimum cumulative pointwise cost over monotone alignments of ``s`` and ``t``."""
    cfg = cfg or DtwConfig()
    s = np.asarray(s, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    if s.size == 0 or t.size == 0:
        raise ValueError("dtw_distance: empty series")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValueError("dtw_distance: non-finite values")
    return float(_dtw_batch(s[None], t[None], cfg.cost, cfg.band)[0])


def pairwise_dtw(series: np.ndarray, cfg: DtwConfig | None = None, chunk_bytes: int = 64 << 20) -> np.ndarray:
    """Symmetric matrix of DTW distances between the rows of ``series`` (N, T)."""
    cfg = cfg or DtwConfig()
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("pairwise_dtw: expected a non-empty (N, T) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("pairwise_dtw: non-finite values")
    n, length = x.shape
    iu, ju = np.triu_indices(n, k=1)
    dist = np.zeros((n, n))
    per_pair = (length + 1) ** 2 * 8
    step = max(1, chunk_bytes // per_pair)
    for lo in range(0, iu.size, step):
        a, b = iu[lo : lo + step], ju[lo : lo + step]
        d = _dtw_batch(x[a], x[b], cfg.cost, cfg.band)
        dist[a, b] = d
        dist[b, a] = d
    return dist


# -- adjacency ------------------------------------------------------------


@dataclass(frozen=True)
class AdjacencyMatrix:
    values: np.ndarray
    kind: str  # "geo" or "dem"
    state: str = "raw"  # "raw" or "normalized"

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"adjacency must be square, got {v.shape}")
        if self.kind not in ("geo", "dem"):
            raise ValueError(f"unknown adjacency kind {self.kind!r}")
        if self.state not in ("raw", "normalized"):
            raise ValueError(f"unknown adjacency state {self.state!r}")


def identity_adjacency(n: int, kind: str) -> AdjacencyMatrix:
    return AdjacencyMatrix(np.eye(n), kind, "raw")


def build_geo_adjacency(coords, tau_km: float = 25.0) -> AdjacencyMatrix:
    """Binary proximity graph: 1 where the great-circle distance is below ``tau_km``.

    Self-loops are always present.
    """
    if not tau_km > 0:
        raise ValueError(f"tau_km must be positive, got {tau_km}")
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if c.shape[0] < 1:
        raise ValueError("need at least one station")
    a = (pairwise_haversine_km(c) < tau_km).astype(np.float64)
    np.fill_diagonal(a, 1.0)
    return AdjacencyMatrix(a, "geo", "raw")


def resolve_gamma(dist: np.ndarray, gamma) -> float:
    if gamma != "auto":
        return float(gamma)
    n = dist.shape[0]
    if n < 2:
        raise ValueError("gamma='auto' needs at least two stations")
    med = float(np.median(dist[np.triu_indices(n, k=1)]))
    return med if med > 0 else 1.0


def build_dem_adjacency(series, cfg: DtwConfig | None = None) -> tuple[AdjacencyMatrix, float]:
    """Demand-similarity graph ``exp(-dtw_ij / gamma)`` over rows of ``series`` (N, T).

    Returns the matrix and the resolved ``gamma``.
    """
    cfg = cfg or DtwConfig()
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("build_dem_adjacency: series must be (N, T) with T >= 2")
    dist = pairwise_dtw(x, cfg)
    gamma = resolve_gamma(dist, cfg.gamma)
    a = np.exp(-dist / gamma)
    if cfg.threshold is not None:
        a = np.where(a >= cfg.threshold, a, 0.0)
    np.fill_diagonal(a, 1.0)
    log.info("demand adjacency: gamma resolved to %.6g", gamma)
    return AdjacencyMatrix(a, "dem", "raw"), gamma


def normalize_adjacency(adj: AdjacencyMatrix) -> AdjacencyMatrix:
    """Symmetric degree normalisation ``D^-1/2 A D^-1/2``."""
    if adj.state != "raw":
        raise ValueError("adjacency is already normalized")
    a = adj.values
    if np.any(a < 0) or not np.allclose(a, a.T):
        raise ValueError("adjacency must be symmetric and non-negative")
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("adjacency has a zero row sum; add self-loops first")
    inv = 1.0 / np.sqrt(deg)
    return replace(adj, values=a * inv[:, None] * inv[None, :], state="normalized")


def write_adjacency_csv(adj: AdjacencyMatrix, station_ids: Sequence[str], path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(station_ids))
        for row in adj.values:
            w.writerow([repr(float(v)) for v in row])


def read_adjacency_csv(path, kind: str, state: str = "raw") -> tuple[AdjacencyMatrix, list[str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0]
    vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    if vals.shape != (len(ids), len(ids)):
        raise ValueError(f"{path}: expected {len(ids)}x{len(ids)} values, got {vals.shape}")
    return AdjacencyMatrix(vals, kind, state), ids

