"""Temporal heads that collapse a ``(..., T, N, H)`` encoding to ``(..., N, H)``.

Four interchangeable kinds: a plain tanh RNN, a GRU, an LSTM (each returning
the last hidden state) and a one-layer 1-D CNN with mean pooling over time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .stgcn import uniform_init

KINDS = ("RNN", "GRU", "LSTM", "1DCNN")
KERNEL_WIDTH = 3

_GATES = {"RNN": ("h",), "GRU": ("z", "r", "n"), "LSTM": ("i", "f", "g", "o")}


@dataclass
class TemporalHead:
    kind: str
    params: dict[str, ad.Tensor]
    hidden: int

    def leaves(self) -> list[ad.Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def init_head(kind: str, in_dim: int, hidden: int, rng: np.random.Generator) -> TemporalHead:
    kind = kind.upper()
    if kind not in KINDS:
        raise ValueError(f"unknown temporal head {kind!r}; expected one of {KINDS}")
    p: dict[str, np.ndarray] = {}
    if kind == "1DCNN":
        fan = KERNEL_WIDTH * in_dim
        p["conv_w"] = uniform_init(rng, (KERNEL_WIDTH, in_dim, hidden), fan)
        p["conv_b"] = np.zeros(hidden)
        p["proj_w"] = uniform_init(rng, (hidden, hidden), hidden)
        p["proj_b"] = np.zeros(hidden)
    else:
        for g in _GATES[kind]:
            p[f"W_{g}"] = uniform_init(rng, (in_dim, hidden), in_dim)
            p[f"U_{g}"] = uniform_init(rng, (hidden, hidden), hidden)
            p[f"b_{g}"] = np.zeros(hidden)
    return TemporalHead(kind, {k: ad.leaf(v) for k, v in p.items()}, hidden)


def min_steps(kind: str) -> int:
    return KERNEL_WIDTH if kind.upper() == "1DCNN" else 1


def _affine(p, g, x, h):
    xw = ad.bias_add(ad.matmul(x, p[f"W_{g}"]), p[f"b_{g}"])
    return xw if h is None else ad.add(xw, ad.matmul(h, p[f"U_{g}"]))


def _step(kind: str, p, x, h, c):
    # h is None at t = 0: the zero initial state contributes nothing
    if kind == "RNN":
        return ad.tanh(_affine(p, "h", x, h)), None
    if kind == "GRU":
        z = ad.sigmoid(_affine(p, "z", x, h))
        if h is None:
            n = ad.tanh(_affine(p, "n", x, None))
            return ad.mul(ad.shift(ad.scale(z, -1.0), 1.0), n), None
        r = ad.sigmoid(_affine(p, "r", x, h))
        n = ad.tanh(_affine(p, "n", x, ad.mul(r, h)))
        keep = ad.mul(z, h)
        return ad.add(ad.mul(ad.shift(ad.scale(z, -1.0), 1.0), n), keep), None
    # LSTM
    i = ad.sigmoid(_affine(p, "i", x, h))
    f = ad.sigmoid(_affine(p, "f", x, h))
    g = ad.tanh(_affine(p, "g", x, h))
    o = ad.sigmoid(_affine(p, "o", x, h))
    c_new = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c_new)), c_new


def summarize(z, head: TemporalHead) -> ad.Tensor:
    """Consume the time axis (third from last) of ``z``; stations act as a batch."""
    z = ad._as_tensor(z)
    if z.value.ndim < 3:
        raise ad.ShapeError(f"summarize: need (..., T, N, H), got {z.shape}")
    steps = z.shape[-3]
    if steps < min_steps(head.kind):
        raise ValueError(f"{head.kind} head needs at least {min_steps(head.kind)} time steps, got {steps}")
    p = head.params

    if head.kind == "1DCNN":
        nd = z.value.ndim
        lead = tuple(range(nd - 3))
        zt = ad.transpose(z, lead + (nd - 2, nd - 3, nd - 1))  # (..., N, T, H)
        conv = ad.relu(ad.bias_add(ad.conv1d(zt, p["conv_w"]), p["conv_b"]))
        pooled = ad.mean(conv, axis=nd - 2)
        return ad.bias_add(ad.matmul(pooled, p["proj_w"]), p["proj_b"])

    h = c = None
    for t in range(steps):
        x_t = ad.getitem(z, (Ellipsis, t, slice(None), slice(None)))
        h, c = _step(head.kind, p, x_t, h, c)
    return h
