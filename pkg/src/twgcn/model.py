"""Forward pass of the dual-graph model and its parameter container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import AdjacencyMatrix
from .regional import RegionHeads, init_region_heads, predict
from .stgcn import BranchParams, encode_sequence, fuse, init_branch
from .temporal import TemporalHead, init_head, summarize


@dataclass
class ModelParams:
    geo: BranchParams
    dem: BranchParams
    head: TemporalHead
    regions: RegionHeads
    alpha: float

    def leaves(self) -> list[ad.Tensor]:
        return [*self.geo.weights, *self.dem.weights, *self.head.leaves(), *self.regions.leaves()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, w in enumerate(self.geo.weights):
            out[f"geo/W{i}"] = w.value
        for i, w in enumerate(self.dem.weights):
            out[f"dem/W{i}"] = w.value
        for k, t in self.head.params.items():
            out[f"head/{k}"] = t.value
        for j, h in enumerate(self.regions.heads):
            for k, t in h.items():
                out[f"region{j}/{k}"] = t.value
        out["alpha"] = np.array(self.alpha)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], kind: str, activation: str = "relu") -> "ModelParams":
        def layer_stack(prefix):
            n = sum(1 for k in arrays if k.startswith(prefix + "/W"))
            return BranchParams([ad.leaf(arrays[f"{prefix}/W{i}"]) for i in range(n)], activation)

        head_params = {k.split("/", 1)[1]: ad.leaf(v) for k, v in arrays.items() if k.startswith("head/")}
        hidden = layer_stack("geo").out_dim
        n_regions = len({k.split("/")[0] for k in arrays if k.startswith("region")})
        regions = RegionHeads(
            [{n: ad.leaf(arrays[f"region{j}/{n}"]) for n in ("W1", "b1", "W2", "b2")} for j in range(n_regions)]
        )
        return cls(layer_stack("geo"), layer_stack("dem"), TemporalHead(kind, head_params, hidden), regions,
                   float(arrays["alpha"]))


def init_model(f_geo: int, f_dem: int, *, kind: str, hidden: int = 32, layers: int = 2,
               alpha: float = 0.5, n_regions: int = 1, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    geo = init_branch(rng, f_geo, hidden, layers)
    dem = init_branch(rng, f_dem, hidden, layers)
    head = init_head(kind, hidden, hidden, rng)
    regions = init_region_heads(n_regions, hidden, rng)
    return ModelParams(geo, dem, head, regions, alpha)


def encode(params: ModelParams, x_geo, x_dem, a_geo: AdjacencyMatrix, a_dem: AdjacencyMatrix) -> ad.Tensor:
    """Fused spatial encoding followed by the temporal summary: ``(..., N, H)``."""
    h_geo, h_dem = encode_sequence(x_geo, x_dem, a_geo, a_dem, params.geo, params.dem)
    return summarize(fuse(h_geo, h_dem, params.alpha).z, params.head)


def forward(params: ModelParams, x_geo, x_dem, a_geo: AdjacencyMatrix, a_dem: AdjacencyMatrix,
            assignments, floor: float = 0.0) -> ad.Tensor:
    """Standardised kWh forecasts of shape ``(..., N)``."""
    z = encode(params, x_geo, x_dem, a_geo, a_dem)
    return predict(z, assignments, params.regions, floor)


def mse_loss(pred: ad.Tensor, target) -> ad.Tensor:
    err = ad.sub(pred, ad.constant(target))
    return ad.mean(ad.mul(err, err))
