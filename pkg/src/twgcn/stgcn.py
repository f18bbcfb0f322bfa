"""Graph-convolutional spatial encoder with two adjacency branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import AdjacencyMatrix

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class BranchParams:
    weights: list[ad.Tensor]
    activation: str = "relu"

    def __post_init__(self):
        if not self.weights:
            raise ValueError("a branch needs at least one layer")
        for w_prev, w in zip(self.weights, self.weights[1:]):
            if w_prev.shape[1] != w.shape[0]:
                raise ValueError(f"layer dims do not chain: {w_prev.shape} -> {w.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_branch(rng: np.random.Generator, in_dim: int, hidden: int, layers: int = 2, activation: str = "relu") -> BranchParams:
    dims = [in_dim] + [hidden] * layers
    ws = [ad.leaf(uniform_init(rng, (a, b), a)) for a, b in zip(dims, dims[1:])]
    return BranchParams(ws, activation)


def gcn_layer(a_norm: AdjacencyMatrix, x, w, sigma: str = "relu") -> ad.Tensor:
    """``sigma(A_norm @ X @ W)`` for ``x`` of shape ``(..., N, F)``.

    Leading axes of ``x`` are independent (time steps, windows).
    """
    if a_norm.state != "normalized":
        raise ValueError("gcn_layer needs a normalized adjacency")
    x = ad._as_tensor(x)
    if x.shape[-2] != a_norm.n:
        raise ad.ShapeError(f"gcn_layer: adjacency is {a_norm.n}x{a_norm.n} but x has shape {x.shape}")
    mixed = ad.matmul(ad.constant(a_norm.values), x)
    return ACTIVATIONS[sigma](ad.matmul(mixed, w))


def gcn_stack(a_norm: AdjacencyMatrix, x, branch: BranchParams) -> ad.Tensor:
    h = x
    for w in branch.weights:
        h = gcn_layer(a_norm, h, w, branch.activation)
    return h


def encode_sequence(x_geo, x_dem, a_geo: AdjacencyMatrix, a_dem: AdjacencyMatrix,
                    geo: BranchParams, dem: BranchParams) -> tuple[ad.Tensor, ad.Tensor]:
    """Run each branch's GCN stack on every time step.

    Inputs are ``(..., T, N, F_branch)``; outputs are ``(..., T, N, H)``.
    Because the adjacency multiplies on the station axis only, applying the
    stack to the whole array is the same as looping over time steps and
    stacking the results.
    """
    x_geo, x_dem = ad._as_tensor(x_geo), ad._as_tensor(x_dem)
    if x_geo.value.ndim < 3 or x_dem.value.ndim < 3:
        raise ad.ShapeError(f"encode_sequence: need (..., T, N, F), got {x_geo.shape} and {x_dem.shape}")
    if x_geo.shape[:-1] != x_dem.shape[:-1]:
        raise ad.ShapeError(f"encode_sequence: branch inputs disagree on (..., T, N): {x_geo.shape} vs {x_dem.shape}")
    if x_geo.shape[-3] == 0:
        raise ValueError("encode_sequence: empty time axis")
    if geo.out_dim != dem.out_dim:
        raise ValueError("both branches must share the hidden size")
    return gcn_stack(a_geo, x_geo, geo), gcn_stack(a_dem, x_dem, dem)


@dataclass
class FusedEncoding:
    z: ad.Tensor
    alpha: float


def fuse(h_geo, h_dem, alpha: float) -> FusedEncoding:
    """Convex blend ``alpha * h_geo + (1 - alpha) * h_dem``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h_geo, h_dem = ad._as_tensor(h_geo), ad._as_tensor(h_dem)
    if h_geo.shape != h_dem.shape:
        raise ad.ShapeError(f"fuse: shape mismatch {h_geo.shape} vs {h_dem.shape}")
    return FusedEncoding(ad.add(ad.scale(h_geo, alpha), ad.scale(h_dem, 1.0 - alpha)), alpha)
