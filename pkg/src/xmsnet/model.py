"""End-to-end network: dual encoder -> per-level fusion -> coarse-to-fine decoder."""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import CoarseToFineDecoder, PredictionPyramid
from .encoder import DualEncoder
from .fusion import AttentiveFusion
from .nn import Init, Module


@contextlib.contextmanager
def _guard(block: str):
    try:
        yield
    except T.NumericalError as exc:
        raise T.NumericalError(f"{exc} in block '{block}'") from exc


class XMSNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, init: Init | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        with T.precision(cfg.dtype):
            init = init or Init(cfg.init_seed)
            widths = cfg.encoder.stage_channels
            self.encoder = DualEncoder(init, cfg.encoder)
            self.fusion = [AttentiveFusion(init, c, cfg.fusion, widths[i - 1] if i else None)
                           for i, c in enumerate(widths)]
            self.decoder = CoarseToFineDecoder(init, widths, cfg.decoder)
        self.state_dict()  # stamps parameter names

    def forward(self, rgb, aux) -> PredictionPyramid:
        rgb, aux = self._cast(rgb), self._cast(aux)
        with _guard("encoder"):
            feats_I, feats_D = self.encoder(rgb, aux)
        states, prev = [], None
        for i, block in enumerate(self.fusion):
            with _guard(f"fusion[{i + 1}]"):
                st = block(feats_I[i], feats_D[i], prev)
            states.append(st)
            prev = st.f_S
        with _guard("decoder"):
            out = self.decoder([s.f_S for s in states], feats_I, feats_D)
        out.states = states
        return out

    def _cast(self, x) -> T.Tensor:
        # tensors already in the model dtype stay on the tape
        if isinstance(x, T.Tensor) and x.dtype == self.cfg.dtype:
            return x
        return T.Tensor(np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=self.cfg.dtype))

    def alphas(self, out: PredictionPyramid):
        return [s.alpha for s in out.states]


def forward(model: XMSNet, rgb, aux) -> PredictionPyramid:
    return model(rgb, aux)


def _conv(c_in, c_out, k, groups=1, bias=True):
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def _mlp(a, h, b):
    return a * h + h + h * b + b


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    widths = cfg.encoder.stage_channels
    fc, dc = cfg.fusion, cfg.decoder
    n = 0
    stream = 0
    c_in = (cfg.encoder.rgb_channels,) + widths[:-1]
    for a, b in zip(c_in, widths):
        stream += _conv(a, b, 3) + _conv(b, b, 3)
    n += stream if cfg.encoder.share_weights else 2 * stream
    if not cfg.encoder.share_weights and cfg.encoder.aux_channels != cfg.encoder.rgb_channels:
        n += (cfg.encoder.aux_channels - cfg.encoder.rgb_channels) * widths[0] * 9
    for i, c in enumerate(widths):
        if fc.use_alpha:
            n += _mlp(c * c if fc.shared_mode == "outer" else c, fc.shared_hidden or c, c)
        if fc.use_tsa:
            k = len(fc.tsa_branches)
            n += 2 * ((_conv(c, 1, 3) if "conv" in fc.tsa_branches else 0) + _conv(k, 1, 3)) + _conv(2, 2, 3)
        if fc.use_tca:
            k = len(fc.tca_branches)
            n += 2 * ((3 * c if "gct" in fc.tca_branches else 0) + _conv(k * c, c, 1, groups=c)) + _conv(2 * c, 2 * c, 1)
        n += _mlp(2 * c, fc.fuse_hidden or c, c)
        if i:
            n += _conv(c + widths[i - 1], c, 3)
    for i, c in enumerate(widths):
        e = dc.lgm_expansion * c
        n += _conv(c, e, 1) + _conv(e, e, 3, groups=e) + _conv(e, e, 1) + _conv(e, c, 1)
        if i < 3 and widths[i + 1] != c:
            n += _conv(widths[i + 1], c, 1)
        n += _mlp(c, c, c)
        n += _conv(c, c, 3) + _conv(c, 1, 1)
        if dc.use_msa:
            n += 2 * _conv(c, c, 1) + _conv(2 * c, c, 3) + 2 * _conv(c, c, 1, bias=False)
    if dc.use_multilevel:
        c1, c2, c3, c4 = widths
        n += _conv(c4 + c3, c3, 3) + _conv(c3 + c2, c2, 3) + _conv(c2 + c1, c1, 3)
        n += sum(_conv(c, c, 3) + _conv(c, 1, 1) for c in (c3, c2, c1))
    return n
