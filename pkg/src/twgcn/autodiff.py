"""Minimal reverse-mode differentiation on dense float64 arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with
Tape() as tape:``). Outside a tape every primitive is a plain forward
computation, which is what inference paths use.

    >>> with Tape() as tape:
    ...     x = leaf([1.0, 2.0, 3.0])
    ...     y = sum_(mul(x, x))
    >>> _ = backward(tape, y)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "twgcn_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value) -> Tensor:
    """A trainable input whose gradient is collected by :func:`backward`.

    Leaves created while a tape is active are registered with it, so they
    receive a (zero) gradient even if no recorded operation uses them.
    """
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.created.append(t)
    return t


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, which is already a topological
    order of the computation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.created: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {id(t): t for t in self.created}
        produced = {id(n.output) for n in self.nodes}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor] = ()) -> list[Tensor]:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves that do not influence ``output`` end up with an all-zero gradient;
    pass ``wrt`` to include leaves created outside the tape that no recorded
    operation touched. Returns the leaves: those created under the tape, then
    first-use order, then any extra ``wrt`` entries.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    leaves = tape.leaves()
    known = {id(t) for t in leaves}
    leaves += [t for t in wrt if t.requires_grad and id(t) not in known]
    for t in leaves:
        t.grad = np.zeros_like(t.value)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi
    for t in leaves:
        if id(t) in grads:
            t.grad = t.grad + grads[id(t)]
    return leaves


def _check_same(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    """Add a scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _record(a.value + c, (a,), lambda g: (g,))


def bias_add(x, b) -> Tensor:
    """``x[..., j] + b[j]``; the only non-scalar broadcast in the engine."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.value.ndim - 1))
    return _record(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands have identical leading (batch) axes, or one of them
    is a plain 2-D matrix shared across the other's batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    ok = (
        av.ndim >= 2
        and bv.ndim >= 2
        and av.shape[-1] == bv.shape[-2]
        and (av.ndim == 2 or bv.ndim == 2 or av.shape[:-2] == bv.shape[:-2])
    )
    if not ok:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        if av.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *av.shape).sum(axis=0)
        if bv.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *bv.shape).sum(axis=0)
        return ga, gb

    return _record(av @ bv, (a, b), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    # split branches keep exp() from overflowing
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.value)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sum_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(x.value.sum(axis=axis)), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[i] for i in axes]))
    return scale(sum_(x, axis=axis), 1.0 / count)


def getitem(x, index) -> Tensor:
    """Basic or fancy indexing; the backward pass scatters with ``np.add.at``."""
    x = _as_tensor(x)
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(np.array(x.value[index]), (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.value.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.value.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, x.shape)) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {x.shape}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([x.value for x in xs], axis=ax), xs, vjp)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis if axis >= 0 else axis + len(xs[0].shape) + 1
    expanded = [reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs]
    return concat(expanded, axis=ax)


def conv1d(x, w) -> Tensor:
    """Valid, stride-1 cross-correlation along the time axis.

    ``x`` is ``(..., T, C_in)`` and ``w`` is ``(K, C_in, C_out)``; the result
    is ``(..., T - K + 1, C_out)``. A 1-D signal with a 1-D kernel is also
    accepted and gives a 1-D result.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.value.ndim == 1 and w.value.ndim == 1:
        out = conv1d(reshape(x, (x.shape[0], 1)), reshape(w, (w.shape[0], 1, 1)))
        return reshape(out, (out.shape[0],))
    xv, wv = x.value, w.value
    if wv.ndim != 3 or xv.ndim < 2 or xv.shape[-1] != wv.shape[1] or xv.shape[-2] < wv.shape[0]:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {w.shape}")
    k = wv.shape[0]
    t_out = xv.shape[-2] - k + 1
    out = sum(xv[..., i : i + t_out, :] @ wv[i] for i in range(k))

    def vjp(g):
        gx = np.zeros_like(xv)
        gw = np.empty_like(wv)
        g2 = g.reshape(-1, g.shape[-1])
        for i in range(k):
            gx[..., i : i + t_out, :] += g @ wv[i].T
            gw[i] = xv[..., i : i + t_out, :].reshape(-1, xv.shape[-1]).T @ g2
        return gx, gw

    return _record(np.asarray(out, dtype=np.float64), (x, w), vjp)


# -- verification ---------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], point, h: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``fn`` maps one or more leaf tensors to a scalar tensor. ``point`` is an
    array or a sequence of arrays (one per argument). The discrepancy per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) or np.isscalar(point) else [
        np.array(p, dtype=np.float64) for p in point
    ]
    leaves = [leaf(a) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    backward(tape, out)
    analytic = [t.grad for t in leaves]

    def value_at(vals):
        return float(fn(*[constant(v) for v in vals]).value)

    worst = 0.0
    for idx, base in enumerate(arrays):
        for pos in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[idx][pos] += h
            minus[idx][pos] -= h
            numeric = (value_at(plus) - value_at(minus)) / (2 * h)
            a = analytic[idx][pos]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
