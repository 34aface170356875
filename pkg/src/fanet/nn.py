"""Layer vocabulary: conv, batch norm, activations, pooling, losses.

All ops take batched tensors with the batch on axis 0 unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record, relu, sigmoid

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
L2_EPS = 1e-12

__all__ = [
    "BatchNormParams",
    "Conv2dParams",
    "batch_norm",
    "broadcast_mul",
    "conv2d",
    "horizontal_flip",
    "linear",
    "pointwise_activation",
    "softmax_cross_entropy",
    "spatial_l2_normalize",
    "stripe_avg_pool",
    "stripe_bounds",
    "stripe_pool",
]


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    """Affine params plus running statistics (updated in place in training mode)."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``p.weight`` [O,C,kh,kw]."""
    w = p.weight
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    s, pad = p.stride, p.padding
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {w.shape} with padding {pad}")
    ho = (h + 2 * pad - kh) // s + 1
    wo = (wd + 2 * pad - kw) // s + 1
    wmat = w.data.reshape(o, -1)

    if kh == 1 and kw == 1 and s == 1 and pad == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # [N,Ho,Wo,C,kh,kw] -> rows of receptive fields
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ wmat.T
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    inputs = (x, w) if p.bias is None else (x, w, p.bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and s == 1 and pad == 0:
                gx = dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            gx = np.ascontiguousarray(gx)
        if p.bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if p.bias.requires_grad else None
        return gx, gw, gb

    return record(np.ascontiguousarray(out), inputs, back)


# ---------------------------------------------------------------- normalization


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    Works for [N,C,H,W] maps and [N,C] vectors alike. Training mode uses the
    population variance of the batch and updates the running stats.
    """
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels but gamma has shape {p.gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    gamma = p.gamma.data.reshape(bshape)

    if training:
        if m <= 1:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        x64 = x.data.astype(np.float64)
        mu = x64.mean(axis=axes)
        var = ((x64 - mu.reshape(bshape)) ** 2).mean(axis=axes)
        rm, rv = p.running_mean.data, p.running_var.data
        rm *= 1 - p.momentum
        rm += (p.momentum * mu).astype(rm.dtype)
        rv *= 1 - p.momentum
        rv += (p.momentum * var).astype(rv.dtype)
    else:
        mu = p.running_mean.data.astype(np.float64)
        var = p.running_var.data.astype(np.float64)

    invstd = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * invstd
    out = gamma * xhat + p.beta.data.reshape(bshape)

    def back(g):
        gg = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(x.dtype)
        gb = np.sum(g, axis=axes, dtype=np.float64).astype(x.dtype)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                s1 = np.sum(dxhat, axis=axes, dtype=np.float64).astype(x.dtype).reshape(bshape)
                s2 = np.sum(dxhat * xhat, axis=axes, dtype=np.float64).astype(x.dtype).reshape(bshape)
                gx = invstd * (dxhat - s1 / m - xhat * (s2 / m))
            else:
                gx = dxhat * invstd
        return gx, gg, gb

    return record(out, (x, p.gamma, p.beta), back)


# ---------------------------------------------------------------- activations


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- dense


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [D] or [N,D]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, weight.shape[0])
        gw = g2.T @ x.data.reshape(-1, weight.shape[1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, inputs, back)


# ---------------------------------------------------------------- pooling / gating


def stripe_bounds(h: int, n_stripes: int) -> list[tuple[int, int]]:
    if n_stripes < 1 or n_stripes > h:
        raise ValueError(f"cannot cut {h} rows into {n_stripes} stripes")
    return [((s * h) // n_stripes, ((s + 1) * h) // n_stripes) for s in range(n_stripes)]


def stripe_pool(x: Tensor, n_stripes: int, mode: str = "avg") -> Tensor:
    """Pool horizontal stripes of ``x`` [N,C,H,W] into [N,n_stripes,C]."""
    n, c, h, w = x.shape
    bounds = stripe_bounds(h, n_stripes)
    out = np.empty((n, n_stripes, c), dtype=x.dtype)
    argmax = []
    for s, (a, b) in enumerate(bounds):
        block = x.data[:, :, a:b, :].reshape(n, c, -1)
        if mode == "avg":
            out[:, s] = np.mean(block, axis=2, dtype=np.float64)
        elif mode == "max":
            idx = block.argmax(axis=2)
            argmax.append(idx)
            out[:, s] = np.take_along_axis(block, idx[..., None], axis=2)[..., 0]
        else:
            raise ValueError(f"unknown stripe pooling mode {mode!r}")

    def back(g):
        gx = np.zeros_like(x.data)
        for s, (a, b) in enumerate(bounds):
            if mode == "avg":
                gx[:, :, a:b, :] = (g[:, s] / ((b - a) * w))[:, :, None, None]
            else:
                blk = np.zeros((n, c, (b - a) * w), dtype=x.dtype)
                np.put_along_axis(blk, argmax[s][..., None], g[:, s][..., None], axis=2)
                gx[:, :, a:b, :] = blk.reshape(n, c, b - a, w)
        return (gx,)

    return record(out, (x,), back)


def stripe_avg_pool(x: Tensor, n_stripes: int) -> Tensor:
    """Unbatched [C,H,W] -> [n_stripes, C] average; batched input passes through."""
    if x.ndim == 3:
        from .tensor import reshape

        return reshape(stripe_pool(reshape(x, (1,) + x.shape), n_stripes), (n_stripes, x.shape[0]))
    return stripe_pool(x, n_stripes, "avg")


def broadcast_mul(x: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of ``x`` by the single-channel map ``m``."""
    if x.shape[-2:] != m.shape[-2:] or m.shape[-3] != 1 or x.ndim != m.ndim:
        raise ValueError(f"broadcast_mul spatial mismatch: {x.shape} vs {m.shape}")
    if x.ndim == 4 and m.shape[0] != x.shape[0]:
        raise ValueError(f"broadcast_mul batch mismatch: {x.shape} vs {m.shape}")
    out = x.data * m.data

    def back(g):
        gx = g * m.data if x.requires_grad else None
        gm = np.sum(g * x.data, axis=-3, keepdims=True) if m.requires_grad else None
        return gx, gm

    return record(out, (x, m), back)


def spatial_l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Divide each channel by its l2 norm over the two trailing axes (plus eps)."""
    sq = np.sum(x.data.astype(np.float64) ** 2, axis=(-2, -1), keepdims=True)
    r = np.sqrt(sq)
    d = r + eps
    out = (x.data / d).astype(x.dtype)

    def back(g):
        gx = g / d
        dot = np.sum(g * x.data, axis=(-2, -1), keepdims=True, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(r > 0, dot / (d * d * r), 0.0)
        return ((gx - x.data * coef).astype(x.dtype),)

    return record(out, (x,), back)


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch.

    ``logits`` is [K] with an int target, or [N,K] with N targets.
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, k = z.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"target out of range for {k} classes: {t.tolist()}")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, t]))
    probs = np.exp(shifted - lse[:, None])

    def back(g):
        d = probs.copy()
        d[rows, t] -= 1.0
        d *= float(np.asarray(g).reshape(-1)[0]) / n
        return (d.astype(logits.dtype).reshape(logits.shape),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------- augmentation


def horizontal_flip(x):
    """Reverse the last axis; works on arrays and (non-differentiably) on tensors."""
    if isinstance(x, Tensor):
        return Tensor(np.ascontiguousarray(x.data[..., ::-1]), dtype=x.dtype)
    return np.ascontiguousarray(np.asarray(x)[..., ::-1])
