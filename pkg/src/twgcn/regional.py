"""Station regionalisation by k-means and region-specific prediction heads."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .stgcn import uniform_init


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def assign_region(z_last, clustering: Clustering | np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the lowest index."""
    centroids = clustering.centroids if isinstance(clustering, Clustering) else np.asarray(clustering)
    z = np.asarray(z_last, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != centroids.shape[1]:
        raise ValueError(f"assign_region: points {z.shape} vs centroids {centroids.shape}")
    return np.argmin(_sq_dists(z, centroids), axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take the first unused one
            nxt = next(i for i in range(n) if i not in idx)
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> Clustering:
    k = centroids.shape[0]
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if not (labels == j).any():
                # reseed from the point worst served by its centroid, never emptying a singleton
                sizes = np.bincount(labels, minlength=k)
                cost = ((x - centroids[labels]) ** 2).sum(axis=1)
                cost[sizes[labels] <= 1] = -1.0
                labels[int(np.argmax(cost))] = j
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    inertia = float(_sq_dists(x, centroids)[np.arange(len(x)), labels].sum())
    return Clustering(k, centroids, labels, inertia, history, it)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds; the best of ``n_init`` restarts is kept.

    The restarts draw from one generator seeded by ``seed``, so equal seeds
    give equal clusterings.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans: points must be 2-D, got {x.shape}")
    if k <= 0:
        raise ValueError(f"kmeans: k must be positive, got {k}")
    if k > x.shape[0]:
        raise ValueError(f"kmeans: k={k} exceeds the number of points ({x.shape[0]})")
    if max_iter < 1:
        raise ValueError("kmeans: max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def write_assignments_csv(station_ids: Sequence[str], assignments, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "region"])
        for sid, r in zip(station_ids, assignments):
            w.writerow([sid, int(r)])


# -- region heads ---------------------------------------------------------


@dataclass
class RegionHeads:
    """One two-layer MLP per region: H -> H/2 (relu) -> 1."""

    heads: list[dict[str, ad.Tensor]]

    @property
    def k(self) -> int:
        return len(self.heads)

    def leaves(self) -> list[ad.Tensor]:
        return [h[name] for h in self.heads for name in ("W1", "b1", "W2", "b2")]


def init_region_heads(k: int, hidden: int, rng: np.random.Generator) -> RegionHeads:
    mid = max(1, hidden // 2)
    heads = []
    for _ in range(k):
        heads.append(
            {
                "W1": ad.leaf(uniform_init(rng, (hidden, mid), hidden)),
                "b1": ad.leaf(np.zeros(mid)),
                "W2": ad.leaf(uniform_init(rng, (mid, 1), mid)),
                "b2": ad.leaf(np.zeros(1)),
            }
        )
    return RegionHeads(heads)


def replicate_head(heads: RegionHeads, k: int) -> RegionHeads:
    """``k`` independent copies of the first head."""
    src = heads.heads[0]
    return RegionHeads([{n: ad.leaf(t.value.copy()) for n, t in src.items()} for _ in range(k)])


def _mlp(head: dict[str, ad.Tensor], z) -> ad.Tensor:
    hidden = ad.relu(ad.bias_add(ad.matmul(z, head["W1"]), head["b1"]))
    return ad.bias_add(ad.matmul(hidden, head["W2"]), head["b2"])


def predict(z, assignments, heads: RegionHeads, floor: float = 0.0) -> ad.Tensor:
    """Per-station forecast from the head of the station's region.

    ``z`` is ``(..., N, H)``; the result is ``(..., N)``. The output is
    ``floor + relu(mlp(z) - floor)``, so with the default ``floor=0`` it is a
    plain relu. Passing the standardised value of 0 kWh keeps forecasts
    non-negative in kWh.
    """
    z = ad._as_tensor(z)
    n = z.shape[-2]
    a = np.asarray(assignments)
    if a.shape != (n,) or np.any(a < 0) or np.any(a >= heads.k):
        raise ValueError(f"predict: need one region in [0, {heads.k}) for each of {n} stations")
    out_shape = z.shape[:-1]
    total = None
    for j, head in enumerate(heads.heads):
        members = a == j
        if not members.any():
            continue
        y = ad.reshape(_mlp(head, z), out_shape)
        if not members.all():
            y = ad.mul(y, ad.constant(np.broadcast_to(members.astype(np.float64), out_shape)))
        total = y if total is None else ad.add(total, y)
    if floor == 0.0:
        return ad.relu(total)
    return ad.shift(ad.relu(ad.shift(total, -floor)), floor)
