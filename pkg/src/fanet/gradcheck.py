"""Finite-difference verification of every differentiable op and the full loss.

Each check builds a scalar probe (a fixed random weighting of the op output,
so errors of opposite sign cannot cancel) and compares backprop against
central differences at 32-bit precision.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .model import AblationConfig, BackboneConfig, init_params, model_forward, overall_loss, target_attention_loss, tem_forward
from .nn import BatchNormParams, Conv2dParams
from .tensor import Tensor, finite_difference_check

logger = logging.getLogger(__name__)

TOLERANCE = 1e-2
TINY_BACKBONE = BackboneConfig(stem_channels=8, branch_channels=(8, 16), tem_channels=(16, 8))


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _probe(y: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=y.shape)
    return (y * Tensor(w, dtype=y.dtype)).sum()


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    def normal(*shape):
        return rng.normal(size=shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    a, b = normal(3, 4), normal(3, 4)
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    x4 = normal(2, 3, 6, 4)
    conv_w, conv_b = Tensor(normal(4, 3, 3, 3) * 0.5), Tensor(normal(4))
    bn = BatchNormParams(Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(normal(3)), Tensor(np.zeros(3)), Tensor(np.ones(3)))
    lin_w, lin_b = Tensor(normal(5, 4)), Tensor(normal(5))
    distinct = (rng.permutation(2 * 3 * 8 * 2) * 0.05).reshape(2, 3, 8, 2)
    mask = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 6, 4)))
    labels = np.array([1, 3, 0])
    F, B, Z = np.abs(normal(2, 3, 4, 2)) + 0.1, np.abs(normal(2, 3, 4, 2)) + 0.1, rng.uniform(0.1, 0.9, size=(2, 1, 4, 2))

    def fresh_bn():
        return BatchNormParams(bn.gamma, bn.beta, Tensor(np.zeros(3)), Tensor(np.ones(3)))

    return [
        ("add", lambda t: _probe(t + Tensor(b), 1), a),
        ("sub", lambda t: _probe(Tensor(b) - t, 2), a),
        ("mul", lambda t: _probe(t * Tensor(b), 3), a),
        ("div", lambda t: _probe(Tensor(b) / t, 4), pos),
        ("exp", lambda t: _probe(T.exp(t), 5), a * 0.5),
        ("log", lambda t: _probe(T.log(t), 6), pos),
        ("square", lambda t: _probe(T.square(t), 7), a),
        ("sigmoid", lambda t: _probe(T.sigmoid(t), 8), a),
        ("relu", lambda t: _probe(T.relu(t), 9), away_from_zero(3, 4)),
        ("sum", lambda t: _probe(T.tsum(t, axis=1), 10), a),
        ("mean", lambda t: _probe(T.mean(t, axis=0, keepdims=True), 11), a),
        ("reshape", lambda t: _probe(T.reshape(t, (2, 6)), 12), a),
        ("transpose", lambda t: _probe(T.transpose(t, (1, 0)), 13), a),
        ("getitem", lambda t: _probe(T.getitem(t, (slice(1, 3), [0, 2, 2])), 14), a),
        ("concat", lambda t: _probe(T.concat([t, Tensor(b), t], axis=1), 15), a),
        ("stack", lambda t: _probe(T.stack([t, Tensor(b)], axis=0), 16), a),
        ("conv2d.input", lambda t: _probe(nn.conv2d(t, Conv2dParams(conv_w, conv_b, 2, 1)), 17), x4),
        ("conv2d.weight", lambda t: _probe(nn.conv2d(Tensor(x4), Conv2dParams(t, conv_b, 1, 1)), 18), conv_w.data),
        ("conv2d.bias", lambda t: _probe(nn.conv2d(Tensor(x4), Conv2dParams(conv_w, t, 1, 1)), 19), conv_b.data),
        ("batch_norm.input", lambda t: _probe(nn.batch_norm(t, fresh_bn(), True), 20), x4),
        (
            "batch_norm.gamma",
            lambda t: _probe(nn.batch_norm(Tensor(x4), BatchNormParams(t, bn.beta, Tensor(np.zeros(3)), Tensor(np.ones(3))), True), 21),
            bn.gamma.data,
        ),
        ("relu_activation", lambda t: _probe(nn.pointwise_activation(t, "relu"), 22), away_from_zero(3, 4)),
        ("linear.input", lambda t: _probe(nn.linear(t, lin_w, lin_b), 23), a),
        ("linear.weight", lambda t: _probe(nn.linear(Tensor(a), t, lin_b), 24), lin_w.data),
        ("stripe_pool.avg", lambda t: _probe(nn.stripe_pool(t, 4, "avg"), 25), x4),
        ("stripe_pool.max", lambda t: _probe(nn.stripe_pool(t, 4, "max"), 26), distinct),
        ("broadcast_mul.input", lambda t: _probe(nn.broadcast_mul(t, mask), 27), x4),
        ("broadcast_mul.mask", lambda t: _probe(nn.broadcast_mul(Tensor(x4), t), 28), mask.data),
        ("spatial_l2_normalize", lambda t: _probe(nn.spatial_l2_normalize(t), 29), x4),
        ("softmax_cross_entropy", lambda t: nn.softmax_cross_entropy(t, labels), normal(3, 5)),
        ("tal.full.F", lambda t: target_attention_loss(t, Tensor(B), Tensor(Z), "full"), F),
        ("tal.full.Z", lambda t: target_attention_loss(Tensor(F), Tensor(B), t, "full"), Z),
        ("tal.v1", lambda t: target_attention_loss(t, Tensor(B), None, "v1"), F),
        ("tal.v2", lambda t: target_attention_loss(Tensor(F), Tensor(B), t, "v2"), Z),
    ]


def _model_checks(seed: int) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """Full training objective w.r.t. the TEM head on a random 2-sample batch."""
    rng = np.random.default_rng(seed)
    params = init_params(4, 3, AblationConfig(k=4, embed_dim=8), TINY_BACKBONE, seed=seed)
    x = rng.uniform(size=(2, 3, 64, 24)).astype(np.float32)
    pid, cid = rng.integers(0, 4, 2), rng.integers(0, 3, 2)

    def loss_wrt(name):
        def f(t):
            saved = params.tensors[name]
            params.tensors[name] = t
            try:
                return overall_loss(model_forward(x, params, training=True), pid, cid, params.config)[0]
            finally:
                params.tensors[name] = saved

        return f

    tem = params.tem()
    F = rng.normal(size=(2, tem.block1[0].weight.shape[1], 4, 3))
    return [
        ("tem_forward.input", lambda t: _probe(tem_forward(t, tem, training=True), 30), F),
        ("L.tem.head.weight", loss_wrt("tem.head.weight"), params.tensors["tem.head.weight"].data.copy()),
        ("L.tem.head.bias", loss_wrt("tem.head.bias"), params.tensors["tem.head.bias"].data.copy()),
    ]


def run_suite(seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, f, x in _op_checks(rng) + _model_checks(seed):
        start = time.perf_counter()
        err = finite_difference_check(f, np.asarray(x, dtype=np.float32))
        results.append(CheckResult(name, err, tolerance))
        logger.debug("%s: %.3g (%.2fs)", name, err, time.perf_counter() - start)
    return results
