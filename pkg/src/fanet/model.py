"""Foreground-aware two-branch re-ID network.

A shared stem feeds two residual branches with independent weights. The
foreground branch produces F, from which the target enhancement module (TEM)
predicts a soft foreground mask Zf. F is gated by Zf, the background branch
output B by 1 - Zf, and both gated maps go through horizontal pyramid pooling
heads that classify person ID (foreground) and camera ID (background).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import nn
from .nn import BatchNormParams, Conv2dParams
from .tensor import Tensor, add, concat, mean, relu, sigmoid, sub

TAL_VARIANTS = ("none", "v1", "v2", "full")
HPP_SCALES = (1, 2, 4, 8)
GROUPS = ("stem", "fg_branch", "bg_branch", "tem", "fg_heads", "bg_heads")


@dataclass(frozen=True)
class AblationConfig:
    enable_tem: bool = True
    enable_background_branch: bool = True
    enable_interaction: bool = True
    tal_variant: str = "full"
    enable_hpp: bool = True
    k: int = 256
    embed_dim: int = 64
    stripe_pool: str = "avg"

    def __post_init__(self):
        if self.tal_variant not in TAL_VARIANTS:
            raise ValueError(f"tal_variant must be one of {TAL_VARIANTS}, got {self.tal_variant!r}")
        if self.k < 1 or self.embed_dim < 1:
            raise ValueError("k and embed_dim must be positive")
        if self.stripe_pool not in ("avg", "max"):
            raise ValueError(f"stripe_pool must be avg or max, got {self.stripe_pool!r}")
        needs_bg = self.enable_interaction or self.tal_variant != "none"
        if needs_bg and not self.enable_background_branch:
            raise ValueError("interaction and TAL require the background branch")
        if (self.enable_interaction or self.tal_variant in ("v2", "full")) and not self.enable_tem:
            raise ValueError("interaction and mask-based TAL require the TEM")

    @property
    def n_stripes(self) -> int:
        return sum(HPP_SCALES) if self.enable_hpp else 1

    @property
    def scales(self) -> tuple[int, ...]:
        return HPP_SCALES if self.enable_hpp else (1,)


ABLATION_ROWS: dict[str, AblationConfig] = {
    "Baseline": AblationConfig(False, False, False, "none", False),
    "+TEM": AblationConfig(True, False, False, "none", False),
    "+BG": AblationConfig(True, True, False, "none", False),
    "+IA": AblationConfig(True, True, True, "none", False),
    "+TAL": AblationConfig(True, True, True, "full", False),
    "+HPP": AblationConfig(True, True, True, "full", True),
}


@dataclass(frozen=True)
class BackboneConfig:
    """Widths and depth of the residual backbone.

    ``stem_blocks`` stride-2 residual stages follow the stride-2 stem conv, so
    the stem stride is ``2 ** (1 + stem_blocks)``; each branch adds one more
    stride-2 stage and then a stride-1 stage.
    """

    in_channels: int = 3
    stem_channels: int = 64
    stem_blocks: int = 1
    branch_channels: tuple[int, int] = (128, 256)
    tem_channels: tuple[int, int] = (256, 128)

    @property
    def stride(self) -> int:
        return 2 ** (2 + self.stem_blocks)

    @property
    def feature_channels(self) -> int:
        return self.branch_channels[1]


DESK_BACKBONE = BackboneConfig()
PAPER_BACKBONE = BackboneConfig(stem_blocks=2)  # stride 16: 384x128 -> 24x8


@dataclass
class TemParams:
    block1: tuple[Conv2dParams, BatchNormParams]
    block2: tuple[Conv2dParams, BatchNormParams]
    head: Conv2dParams

    @property
    def k(self) -> int:
        return self.head.weight.shape[0]


@dataclass
class HeadParams:
    embed: Tensor
    bn: BatchNormParams
    cls_weight: Tensor
    cls_bias: Tensor


class ModelParams:
    """Named parameter store with per-group read counters.

    Names look like ``fg_branch.block0.conv1.weight``; the leading component
    is the group used for LR multipliers and for the read instrumentation.
    """

    def __init__(
        self,
        tensors: dict[str, Tensor],
        config: AblationConfig,
        backbone: BackboneConfig,
        n_persons: int,
        n_cameras: int,
    ):
        self.tensors = tensors
        self.config = config
        self.backbone = backbone
        self.n_persons = n_persons
        self.n_cameras = n_cameras
        self.reads: Counter[str] = Counter()

    def __getitem__(self, name: str) -> Tensor:
        self.reads[name.split(".", 1)[0]] += 1
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def conv(self, prefix: str, stride: int = 1, padding: int = 0) -> Conv2dParams:
        bias = self[prefix + ".bias"] if prefix + ".bias" in self.tensors else None
        return Conv2dParams(self[prefix + ".weight"], bias, stride, padding)

    def bn(self, prefix: str) -> BatchNormParams:
        return BatchNormParams(
            self[prefix + ".gamma"],
            self[prefix + ".beta"],
            self[prefix + ".running_mean"],
            self[prefix + ".running_var"],
        )

    def tem(self) -> TemParams:
        return TemParams(
            (self.conv("tem.block1.conv"), self.bn("tem.block1.bn")),
            (self.conv("tem.block2.conv", padding=1), self.bn("tem.block2.bn")),
            self.conv("tem.head"),
        )

    def heads(self, side: str) -> list[HeadParams]:
        return [
            HeadParams(
                self[f"{side}_heads.s{i}.embed.weight"],
                self.bn(f"{side}_heads.s{i}.bn"),
                self[f"{side}_heads.s{i}.cls.weight"],
                self[f"{side}_heads.s{i}.cls.bias"],
            )
            for i in range(self.config.n_stripes)
        ]


# ---------------------------------------------------------------- initialization


class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.tensors: dict[str, Tensor] = {}

    def _add(self, name, arr, trainable=True):
        self.tensors[name] = Tensor(arr.astype(self.dtype), requires_grad=trainable, name=name)

    def conv(self, name, cin, cout, ksize, bias=False):
        std = np.sqrt(2.0 / (cout * ksize * ksize))
        self._add(name + ".weight", self.rng.normal(0.0, std, (cout, cin, ksize, ksize)))
        if bias:
            self._add(name + ".bias", np.zeros(cout))

    def bn(self, name, c):
        self._add(name + ".gamma", np.ones(c))
        self._add(name + ".beta", np.zeros(c))
        self._add(name + ".running_mean", np.zeros(c), trainable=False)
        self._add(name + ".running_var", np.ones(c), trainable=False)

    def block(self, name, cin, cout, stride):
        self.conv(name + ".conv1", cin, cout, 3)
        self.bn(name + ".bn1", cout)
        self.conv(name + ".conv2", cout, cout, 3)
        self.bn(name + ".bn2", cout)
        if stride != 1 or cin != cout:
            self.conv(name + ".down", cin, cout, 1)
            self.bn(name + ".down_bn", cout)

    def head(self, name, cin, dim, n_classes):
        self._add(name + ".embed.weight", self.rng.normal(0.0, np.sqrt(2.0 / dim), (dim, cin)))
        self.bn(name + ".bn", dim)
        self._add(name + ".cls.weight", self.rng.normal(0.0, 0.001, (n_classes, dim)))
        self._add(name + ".cls.bias", np.zeros(n_classes))


def init_params(
    n_persons: int,
    n_cameras: int,
    config: AblationConfig = AblationConfig(),
    backbone: BackboneConfig = DESK_BACKBONE,
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """Fresh weights. Draw order is fixed so a seed fully determines the model."""
    ini = _Init(np.random.default_rng(seed), dtype)
    bb = backbone
    ini.conv("stem.conv", bb.in_channels, bb.stem_channels, 7)
    ini.bn("stem.bn", bb.stem_channels)
    for i in range(bb.stem_blocks):
        ini.block(f"stem.block{i}", bb.stem_channels, bb.stem_channels, 2)
    c1, c2 = bb.branch_channels
    sides = ["fg"] + (["bg"] if config.enable_background_branch else [])
    for side in sides:
        ini.block(f"{side}_branch.block0", bb.stem_channels, c1, 2)
        ini.block(f"{side}_branch.block1", c1, c2, 1)
    if config.enable_tem:
        t1, t2 = bb.tem_channels
        ini.conv("tem.block1.conv", c2, t1, 1)
        ini.bn("tem.block1.bn", t1)
        ini.conv("tem.block2.conv", t1, t2, 3)
        ini.bn("tem.block2.bn", t2)
        ini.conv("tem.head", t2, config.k, 1, bias=True)
    for side in sides:
        n_classes = n_persons if side == "fg" else n_cameras
        for i in range(config.n_stripes):
            ini.head(f"{side}_heads.s{i}", c2, config.embed_dim, n_classes)
    return ModelParams(ini.tensors, config, backbone, n_persons, n_cameras)


# ---------------------------------------------------------------- building blocks


def _conv_bn(params: ModelParams, conv: str, bn: str, x: Tensor, training: bool, stride=1, padding=0, act=True):
    y = nn.batch_norm(nn.conv2d(x, params.conv(conv, stride, padding)), params.bn(bn), training)
    return relu(y) if act else y


def residual_block(params: ModelParams, prefix: str, x: Tensor, stride: int, training: bool) -> Tensor:
    out = _conv_bn(params, prefix + ".conv1", prefix + ".bn1", x, training, stride, 1)
    out = _conv_bn(params, prefix + ".conv2", prefix + ".bn2", out, training, 1, 1, act=False)
    if prefix + ".down.weight" in params:
        shortcut = _conv_bn(params, prefix + ".down", prefix + ".down_bn", x, training, stride, 0, act=False)
    else:
        shortcut = x
    return relu(add(out, shortcut))


def stem_forward(params: ModelParams, x: Tensor, training: bool) -> Tensor:
    y = _conv_bn(params, "stem.conv", "stem.bn", x, training, stride=2, padding=3)
    for i in range(params.backbone.stem_blocks):
        y = residual_block(params, f"stem.block{i}", y, 2, training)
    return y


def branch_forward(params: ModelParams, side: str, x: Tensor, training: bool) -> Tensor:
    y = residual_block(params, f"{side}_branch.block0", x, 2, training)
    return residual_block(params, f"{side}_branch.block1", y, 1, training)


# ---------------------------------------------------------------- mechanism


def tem_forward(F: Tensor, p: TemParams, training: bool = True) -> Tensor:
    """Soft foreground mask: sigmoid of the channel mean of the k raw maps.

    ``F`` is [N,C,H,W] (or unbatched [C,H,W]); the result has one channel.
    """
    unbatched = F.ndim == 3
    if unbatched:
        F = F.reshape((1,) + F.shape)
    conv1, bn1 = p.block1
    if F.shape[1] != conv1.weight.shape[1]:
        raise ValueError(f"TEM expects {conv1.weight.shape[1]} input channels, got {F.shape}")
    y = relu(nn.batch_norm(nn.conv2d(F, conv1), bn1, training))
    conv2, bn2 = p.block2
    y = relu(nn.batch_norm(nn.conv2d(y, conv2), bn2, training))
    z_raw = nn.conv2d(y, p.head)
    zf = sigmoid(mean(z_raw, axis=1, keepdims=True))
    return zf.reshape(zf.shape[1:]) if unbatched else zf


def gate_features(F: Tensor, B: Tensor | None, Zf: Tensor | None, config: AblationConfig):
    """Return (Fg, Bg): F gated by Zf, B gated by 1 - Zf when interaction is on."""
    Fg = F if Zf is None else nn.broadcast_mul(F, Zf)
    if B is None:
        return Fg, None
    if config.enable_interaction:
        if Zf is None:
            raise ValueError("interaction needs an attention map")
        return Fg, nn.broadcast_mul(B, sub(1.0, Zf))
    return Fg, B


def target_attention_loss(F: Tensor, B: Tensor, Zf: Tensor | None, variant: str = "full") -> Tensor:
    """Penalty on foreground responses where the mask says background, and vice versa.

    ``full`` spatially l2-normalizes F and B first; ``v2`` skips the
    normalization; ``v1`` ignores the mask; ``none`` is a detached zero.
    """
    if variant not in TAL_VARIANTS:
        raise ValueError(f"unknown TAL variant {variant!r}")
    if variant == "none":
        return Tensor(np.zeros((), dtype=F.dtype))
    if F.shape != B.shape:
        raise ValueError(f"F and B differ in shape: {F.shape} vs {B.shape}")
    if variant == "v1":
        return mean(add(F, B))
    if Zf is None:
        raise ValueError(f"TAL variant {variant!r} needs an attention map")
    if variant == "full":
        F = nn.spatial_l2_normalize(F)
        B = nn.spatial_l2_normalize(B)
    return mean(add(nn.broadcast_mul(F, sub(1.0, Zf)), nn.broadcast_mul(B, Zf)))


def hpp_heads(Xg: Tensor, heads: list[HeadParams], enable_hpp: bool, training: bool, pool: str = "avg"):
    """Pool stripes at each pyramid scale, embed each stripe, classify each embedding.

    Returns (per-stripe logits, descriptor) with stripes in scale-major order.
    """
    scales = HPP_SCALES if enable_hpp else (1,)
    if enable_hpp and Xg.shape[-2] < max(HPP_SCALES):
        raise ValueError(f"HPP needs at least {max(HPP_SCALES)} feature rows, got {Xg.shape[-2]}")
    if len(heads) != sum(scales):
        raise ValueError(f"expected {sum(scales)} stripe heads, got {len(heads)}")
    logits, embeds = [], []
    i = 0
    for n in scales:
        pooled = nn.stripe_pool(Xg, n, pool)
        for s in range(n):
            h = heads[i]
            e = nn.batch_norm(nn.linear(pooled[:, s, :], h.embed), h.bn, training)
            embeds.append(e)
            logits.append(nn.linear(e, h.cls_weight, h.cls_bias))
            i += 1
    return logits, concat(embeds, axis=1)


@dataclass
class ForwardOutputs:
    F: Tensor
    Fg: Tensor
    fg_logits: list[Tensor]
    descriptor: Tensor
    Zf: Tensor | None = None
    Zb: Tensor | None = None
    B: Tensor | None = None
    Bg: Tensor | None = None
    bg_logits: list[Tensor] = field(default_factory=list)


def model_forward(x, params: ModelParams, training: bool, foreground_only: bool = False) -> ForwardOutputs:
    """Run the network on a batch ``x`` [N,3,H,W].

    ``foreground_only`` skips every background-branch computation; that is
    the inference path and it reads no background parameters.
    """
    cfg = params.config
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=params["stem.conv.weight"].dtype)
    if x.ndim != 4:
        raise ValueError(f"expected a batch [N,C,H,W], got {x.shape}")
    stride = params.backbone.stride
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"input {h}x{w} not divisible by backbone stride {stride}")
    if cfg.enable_hpp and h // stride < max(HPP_SCALES):
        raise ValueError(f"input height {h} gives {h // stride} feature rows; HPP needs {max(HPP_SCALES)}")

    low = stem_forward(params, x, training)
    F = branch_forward(params, "fg", low, training)
    use_bg = cfg.enable_background_branch and not foreground_only
    B = branch_forward(params, "bg", low, training) if use_bg else None
    Zf = tem_forward(F, params.tem(), training) if cfg.enable_tem else None
    Zb = sub(1.0, Zf) if Zf is not None else None
    Fg, Bg = gate_features(F, B, Zf, replace(cfg, enable_interaction=cfg.enable_interaction and use_bg))
    fg_logits, desc = hpp_heads(Fg, params.heads("fg"), cfg.enable_hpp, training, cfg.stripe_pool)
    out = ForwardOutputs(F=F, Fg=Fg, fg_logits=fg_logits, descriptor=desc, Zf=Zf, Zb=Zb, B=B, Bg=Bg)
    if use_bg:
        out.bg_logits, _ = hpp_heads(Bg, params.heads("bg"), cfg.enable_hpp, training, cfg.stripe_pool)
    return out


def overall_loss(outputs: ForwardOutputs, person_ids, camera_ids, config: AblationConfig):
    """(L, L_f, L_b, L_t) with L = (L_f + L_b) / 2 + L_t.

    Stripe losses are averaged over stripes; each is already a batch mean.
    """
    Lf = _stripe_mean([nn.softmax_cross_entropy(z, person_ids) for z in outputs.fg_logits])
    dtype = outputs.F.dtype
    if config.enable_background_branch and outputs.bg_logits:
        Lb = _stripe_mean([nn.softmax_cross_entropy(z, camera_ids) for z in outputs.bg_logits])
    else:
        Lb = Tensor(np.zeros((), dtype=dtype))
    if config.tal_variant != "none" and outputs.B is not None:
        Lt = target_attention_loss(outputs.F, outputs.B, outputs.Zf, config.tal_variant)
    else:
        Lt = Tensor(np.zeros((), dtype=dtype))
    L = add(add(Lf, Lb) * 0.5, Lt)
    return L, Lf, Lb, Lt


def _stripe_mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    return total * (1.0 / len(losses))
