"""Dual-stream plain conv encoder producing 4-level feature pyramids (strides 4/8/16/32)."""

from __future__ import annotations

from . import tensor as T
from .config import EncoderConfig
from .nn import Conv2d, Init, Module
from .tensor import ShapeError, Tensor

STAGE_STRIDES = (4, 2, 2, 2)


class Stage(Module):
    def __init__(self, init: Init, c_in: int, c_out: int, stride: int):
        self.down = Conv2d(init, c_in, c_out, 3, stride=stride, padding=1)
        self.conv = Conv2d(init, c_out, c_out, 3)

    def forward(self, x):
        return T.relu(self.conv(T.relu(self.down(x))))


class Stream(Module):
    def __init__(self, init: Init, c_in: int, widths):
        ins = (c_in,) + tuple(widths[:-1])
        self.stages = [Stage(init, a, b, s) for a, b, s in zip(ins, widths, STAGE_STRIDES)]

    def forward(self, x) -> list[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def check_extents(x: Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input extents {h}x{w} must be divisible by 32")


class DualEncoder(Module):
    """Two weight-independent ("parallel") streams for RGB and the auxiliary modality."""

    def __init__(self, init: Init, cfg: EncoderConfig):
        self.cfg = cfg
        self.rgb = Stream(init, cfg.rgb_channels, cfg.stage_channels)
        if not cfg.share_weights:
            self.aux = Stream(init, cfg.aux_channels, cfg.stage_channels)

    def forward(self, rgb, aux):
        rgb, aux = T.as_tensor(rgb), T.as_tensor(aux)
        check_extents(rgb)
        if rgb.shape[-2:] != aux.shape[-2:]:
            raise ShapeError(f"stream extents differ: {rgb.shape} vs {aux.shape}")
        aux_stream = self.rgb if self.cfg.share_weights else self.aux
        return self.rgb(rgb), aux_stream(aux)


def encode_pair(encoder: DualEncoder, rgb, aux):
    return encoder(rgb, aux)
