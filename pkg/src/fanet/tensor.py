"""Reverse-mode autodiff over dense numpy arrays.

Operations are recorded on the innermost active :class:`Graph` whenever at
least one input requires a gradient. Outside any graph nothing is recorded,
which is how inference runs without building a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GraphError(RuntimeError):
    """Raised for misuse of the computation graph (bad loss, foreign loss)."""


class Tensor:
    """N-dimensional float array with optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar; the functions below do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Graph:
    """Tape of recorded operations; recording order is a topological order."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def owns(self, t: Tensor) -> bool:
        return t.node is not None and t.node < len(self.records) and self.records[t.node].out is t


_ACTIVE: list[Graph] = []


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and, if any input needs a gradient, put it on the tape."""
    out = Tensor(out_data, dtype=out_data.dtype)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = len(g.records)
        g.records.append(_Record(out, tuple(inputs), backward))
    return out


def backward_pass(graph: Graph, loss: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into leaves (``+=``); leaves used on the tape but not
    reachable from the loss end up holding zeros.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.requires_grad and loss.node is not None and not graph.owns(loss):
        raise GraphError("loss was not recorded on this graph")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        seed = np.ones_like(loss.data)
        if loss.node is None:
            _accumulate_leaf(loss, seed)
        else:
            grads[loss.node] = seed
        last = loss.node if loss.node is not None else -1
    else:
        last = -1

    touched: dict[int, Tensor] = {}
    for i in range(len(graph.records) - 1, -1, -1):
        rec = graph.records[i]
        for t in rec.inputs:
            if t.requires_grad and t.node is None:
                touched[id(t)] = t
        if i > last:
            continue
        g_out = grads.pop(i, None)
        if g_out is None:
            continue
        rec.out.grad = g_out
        in_grads = rec.backward(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise GraphError(f"backward produced shape {g.shape} for input of shape {t.shape}")
            if t.node is None:
                _accumulate_leaf(t, g)
            elif t.node in grads:
                grads[t.node] = grads[t.node] + g
            else:
                grads[t.node] = g

    for t in touched.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = (np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return record(np.asarray(out), (x,), back)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _has_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return record(out, (x,), back)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, xs, back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.stack([t.data for t in xs], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return record(out, xs, back)


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdConfig:
    base_lr: float = 0.06
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_multipliers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(
    params: dict[str, Tensor],
    config: SgdConfig,
    epoch_lr: float,
    velocity: dict[str, np.ndarray] | None = None,
    group_of: Callable[[str], str] = lambda name: name.split(".", 1)[0],
) -> dict[str, np.ndarray]:
    """One SGD update with decoupled-in-gradient weight decay and heavy-ball momentum.

    ``velocity`` is updated in place and returned (a fresh dict if None).
    Gradients are left untouched; the caller zeroes them.
    """
    if velocity is None:
        velocity = {}
    for name, w in params.items():
        if not w.requires_grad:
            continue
        if w.grad is None:
            raise GraphError(f"parameter {name!r} has no gradient")
        lr = epoch_lr * config.lr_multipliers.get(group_of(name), 1.0)
        g = w.grad + config.weight_decay * w.data if config.weight_decay else w.grad
        v = velocity.get(name)
        if v is None or config.momentum == 0:
            v = g.astype(w.dtype, copy=True)
        else:
            v *= config.momentum
            v += g
        velocity[name] = v
        if lr:
            w.data -= (lr * v).astype(w.dtype)
    return velocity


# ---------------------------------------------------------------- gradient check


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-3,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if base.dtype not in (np.float32, np.float64):
        base = base.astype(DEFAULT_DTYPE)

    with Graph() as g:
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        backward_pass(g, out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1).astype(np.float64)

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    flat = base.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        with np.errstate(all="ignore"):
            fp = float(f(Tensor(base.copy())).item())
        flat[i] = orig - eps
        with np.errstate(all="ignore"):
            fm = float(f(Tensor(base.copy())).item())
        flat[i] = orig
        # the perturbation actually applied after rounding to storage precision
        step = float(base.dtype.type(orig + eps)) - float(base.dtype.type(orig - eps))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {_coord(i, base.shape)}")
        num = (fp - fm) / step
        a = analytic[i]
        if not math.isfinite(a):
            raise FloatingPointError(f"non-finite gradient at coordinate {_coord(i, base.shape)}")
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        worst = max(worst, err)
    return worst


def _coord(i: int, shape) -> tuple[int, ...]:
    return tuple(int(c) for c in np.unravel_index(i, shape))
