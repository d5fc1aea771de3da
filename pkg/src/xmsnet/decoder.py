"""Coarse-to-fine decoder: initial predictions from fused features, masked channel
attention refinement with modality-aware queries, and multi-level aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .nn import ConcatConv, Conv2d, Init, Module, TokenMLP
from .tensor import ShapeError, Tensor


@dataclass
class PredictionPyramid:
    p: list                     # initial logits p_1..p_4, finest first
    f: list                     # decoded features f_1..f_4
    f_o: list                   # refined features
    p_low: Tensor | None = None
    p_mid: Tensor | None = None
    p_high: Tensor | None = None
    f_low: Tensor | None = None
    f_mid: Tensor | None = None
    f_high: Tensor | None = None
    attention: list = field(default_factory=list)
    states: list = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        """Logits of the finest refined output (p_high, or p_1 without aggregation)."""
        return self.p_high if self.p_high is not None else self.p[0]


class LGM(Module):
    """Local-global modelling: expand, split, multi-window same-size max pools, DSConv, reduce."""

    def __init__(self, init: Init, c: int, cfg: DecoderConfig):
        e = cfg.lgm_expansion * c
        if e % cfg.lgm_parts:
            raise ShapeError(f"expanded width {e} not divisible into {cfg.lgm_parts} subparts")
        self.windows = cfg.lgm_windows
        self.parts = cfg.lgm_parts
        self.expand = Conv2d(init, c, e, 1)
        self.depthwise = Conv2d(init, e, e, 3, groups=e)
        self.pointwise = Conv2d(init, e, e, 1)
        self.reduce = Conv2d(init, e, c, 1)

    def pooled(self, f) -> list[Tensor]:
        parts = T.chunk(self.expand(f), self.parts, axis=-3)
        # a window-1 pool is the identity
        return [p if w == 1 else T.max_pool2d(p, w, 1, w // 2) for p, w in zip(parts, self.windows)]

    def forward(self, f) -> Tensor:
        x = T.concat(self.pooled(f), axis=-3)
        return self.reduce(self.pointwise(self.depthwise(x)))


class FM(Module):
    """Feature merging: upsample the coarser feature, multiply into LG, token MLP."""

    def __init__(self, init: Init, c: int, c_next: int | None = None):
        self.proj = Conv2d(init, c_next, c, 1) if c_next and c_next != c else None
        self.mlp = TokenMLP(init, c, c, c)

    def forward(self, f_next, lg) -> Tensor:
        if self.proj is not None:
            f_next = self.proj(f_next)
        f_next = T.bilinear_upsample(f_next, *lg.shape[-2:])
        if f_next.shape != lg.shape:
            raise ShapeError(f"merged features differ: {f_next.shape} vs {lg.shape}")
        return self.mlp(T.mul(f_next, lg))


class Head(Module):
    """Conv3x3 -> ReLU -> Conv1x1 to a single logit map."""

    def __init__(self, init: Init, c: int):
        self.conv3 = Conv2d(init, c, c, 3)
        self.conv1 = Conv2d(init, c, 1, 1)

    def forward(self, f) -> Tensor:
        return self.conv1(T.relu(self.conv3(f)))


def _mask(p: Tensor, mode: str) -> Tensor:
    if mode == "hard":
        return Tensor((p.data > 0).astype(p.dtype))
    return T.sigmoid(p)


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)


class MSA(Module):
    """Masked self-attention guided by the coarser prediction.

    Queries draw on both encoder features; keys and values come from the masked
    shared feature through bias-free projections, so an all-zero mask yields an
    all-zero output.
    """

    def __init__(self, init: Init, c: int):
        self.q_I = Conv2d(init, c, c, 1)
        self.q_D = Conv2d(init, c, c, 1)
        self.q_merge = ConcatConv(init, (c, c), c)
        self.key = Conv2d(init, c, c, 1, bias=False)
        self.value = Conv2d(init, c, c, 1, bias=False)

    def forward(self, f_I, f_D, p, f, mask_mode: str = "sigmoid") -> tuple[Tensor, Tensor]:
        f_I, f_D, p, f = (T.as_tensor(x) for x in (f_I, f_D, p, f))
        if not (f_I.shape == f_D.shape == f.shape) or p.shape[-2:] != f.shape[-2:]:
            raise ShapeError(f"msa extents differ: {f_I.shape}, {f_D.shape}, {p.shape}, {f.shape}")
        masked = T.mul(_mask(p, mask_mode), f)
        h, w = f.shape[-2:]
        lead = "n " if f.ndim == 4 else ""
        flat = f"{lead}c h w -> {lead}c (h w)"
        q = T.rearrange(self.q_merge(self.q_I(f_I), self.q_D(f_D)), flat)
        k = T.rearrange(self.key(masked), flat)
        v = T.rearrange(self.value(masked), flat)
        att = T.softmax(T.mul(T.matmul(q, _swap_last(k)), 1.0 / np.sqrt(h * w)), axis=-1)
        out = T.rearrange(T.matmul(att, v), f"{lead}c (h w) -> {lead}c h w", h=h, w=w)
        return T.add(out, masked), att


class MultiLevel(Module):
    """Pair neighbouring refined layers into low / mid / high outputs, each with a head."""

    def __init__(self, init: Init, widths):
        c1, c2, c3, c4 = widths
        self.low = ConcatConv(init, (c4, c3), c3)
        self.mid = ConcatConv(init, (c3, c2), c2)
        self.high = ConcatConv(init, (c2, c1), c1)
        self.head_low = Head(init, c3)
        self.head_mid = Head(init, c2)
        self.head_high = Head(init, c1)

    def forward(self, f_o):
        if len(f_o) != 4 or any(x is None for x in f_o):
            raise ShapeError("multi-level aggregation needs refined features at all 4 layers")
        up = lambda x, ref: T.bilinear_upsample(x, *ref.shape[-2:])  # noqa: E731
        f_low = self.low(up(f_o[3], f_o[2]), f_o[2])
        f_mid = self.mid(up(f_low, f_o[1]), f_o[1])
        f_high = self.high(up(f_mid, f_o[0]), f_o[0])
        return (self.head_low(f_low), f_low, self.head_mid(f_mid), f_mid,
                self.head_high(f_high), f_high)


class CoarseToFineDecoder(Module):
    def __init__(self, init: Init, widths, cfg: DecoderConfig):
        self.cfg = cfg
        self.lgm = [LGM(init, c, cfg) for c in widths]
        self.fm = [FM(init, c, widths[i + 1] if i < 3 else None) for i, c in enumerate(widths)]
        self.head = [Head(init, c) for c in widths]
        if cfg.use_msa:
            self.msa = [MSA(init, c) for c in widths]
        if cfg.use_multilevel:
            self.multilevel = MultiLevel(init, widths)

    def forward(self, f_S, feats_I, feats_D) -> PredictionPyramid:
        f = [None] * 4
        p = [None] * 4
        for i in range(3, -1, -1):
            lg = self.lgm[i](f_S[i])
            f_next = T.global_avg_pool(f_S[3]) if i == 3 else f[i + 1]
            f[i] = self.fm[i](f_next, lg)
            p[i] = self.head[i](f[i])
        f_o, att = [], []
        for i in range(4):
            if self.cfg.use_msa:
                o, a = self.msa[i](feats_I[i], feats_D[i], p[i], f[i], self.cfg.mask_mode)
                att.append(a)
            else:
                o = T.mul(_mask(p[i], self.cfg.mask_mode), f[i])
            f_o.append(o)
        out = PredictionPyramid(p=p, f=f, f_o=f_o, attention=att)
        if self.cfg.use_multilevel:
            (out.p_low, out.f_low, out.p_mid, out.f_mid,
             out.p_high, out.f_high) = self.multilevel(f_o)
        return out
