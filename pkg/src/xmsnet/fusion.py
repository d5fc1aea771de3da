"""All-round attentive fusion of the RGB and auxiliary feature at one pyramid level.

Each modality is split into a mean (GAP) encoding and a residual variance
encoding. The means give a shared descriptor and the modal proportion alpha;
the variances drive trio spatial (TSA) and trio channel (TCA) calibration maps.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .config import FusionConfig
from .nn import MLP, ConcatConv, Conv2d, Init, Module, TokenMLP
from .tensor import ShapeError, Tensor

PROPORTION_EPS = 1e-6
_TINY = 1e-12


@dataclass
class FusionState:
    m_I: Tensor
    m_D: Tensor
    v_I: Tensor
    v_D: Tensor
    m_S: Tensor | None
    alpha: Tensor | None
    s_I: Tensor | None
    s_D: Tensor | None
    c_I: Tensor | None
    c_D: Tensor | None
    f_S: Tensor


def decompose(f) -> tuple[Tensor, Tensor]:
    """Split ``f`` into its per-channel mean and the residual, ``f == mean + residual``."""
    m = T.global_avg_pool(f)
    return m, T.sub(f, m)


def _vec(m: Tensor) -> Tensor:
    # (..., c, 1, 1) -> (..., c)
    return T.reshape(m, m.shape[:-3] + (m.shape[-3],))


class SharedMean(Module):
    """m_S = MLP(m_I (x) m_D): the c x c outer product, flattened, mapped back to c."""

    def __init__(self, init: Init, c: int, hidden: int | None = None, mode: str = "outer"):
        self.mode = mode
        d_in = c * c if mode == "outer" else c
        self.mlp = MLP(init, d_in, hidden or c, c)

    def forward(self, m_I, m_D) -> Tensor:
        if m_I.shape != m_D.shape:
            raise ShapeError(f"mean encodings differ: {m_I.shape} vs {m_D.shape}")
        a, b = _vec(m_I), _vec(m_D)
        c = a.shape[-1]
        if self.mode == "outer":
            outer = T.matmul(T.reshape(a, a.shape + (1,)), T.reshape(b, b.shape[:-1] + (1, c)))
            x = T.reshape(outer, a.shape[:-1] + (c * c,))
        else:
            x = T.mul(a, b)
        return T.reshape(self.mlp(x), m_I.shape)


def shared_mean(block: SharedMean, m_I, m_D) -> Tensor:
    return block(m_I, m_D)


def modal_proportion(m_S, m_I, m_D, eps: float = PROPORTION_EPS) -> Tensor:
    """alpha = a / (a + b) with a, b the cosines of m_S against m_I and m_D.

    When either cosine is negative or a + b <= eps the ratio is taken on the
    shifted similarities a + 1, b + 1, which keeps alpha in [0, 1].
    """
    s, i, d = _vec(T.as_tensor(m_S)), _vec(T.as_tensor(m_I)), _vec(T.as_tensor(m_D))
    a = T.clip(T.cosine_similarity(s, i), -1.0, 1.0)
    b = T.clip(T.cosine_similarity(s, d), -1.0, 1.0)
    ok = (a.data >= 0) & (b.data >= 0) & (a.data + b.data > eps)
    shift = Tensor((~ok).astype(a.dtype))
    a = T.add(a, shift)
    b = T.add(b, shift)
    return T.div(T.add(a, _TINY), T.add(T.add(a, b), 2 * _TINY))


class TSA(Module):
    """Trio spatial attention: channel-max, channel-mean and conv maps fused by a 3x3 conv."""

    def __init__(self, init: Init, c: int, branches=("max", "mean", "conv")):
        self.branches = tuple(branches)
        if "conv" in self.branches:
            self.conv = Conv2d(init, c, 1, 3)
        self.fuse = Conv2d(init, len(self.branches), 1, 3)

    def branch_maps(self, v) -> list[Tensor]:
        maps = []
        for name in self.branches:
            if name == "max":
                maps.append(T.amax(v, axis=-3, keepdims=True))
            elif name == "mean":
                maps.append(T.mean(v, axis=-3, keepdims=True))
            else:
                maps.append(self.conv(v))
        return maps

    def forward(self, v) -> Tensor:
        return self.fuse(T.concat(self.branch_maps(v), axis=-3))


class CrossModalSpatial(Module):
    def __init__(self, init: Init):
        self.conv = Conv2d(init, 2, 2, 3)

    def forward(self, t_I, t_D) -> tuple[Tensor, Tensor]:
        if t_I.shape != t_D.shape:
            raise ShapeError(f"spatial descriptors differ: {t_I.shape} vs {t_D.shape}")
        s_I, s_D = T.chunk(self.conv(T.concat([t_I, t_D], axis=-3)), 2, axis=-3)
        return T.sigmoid(s_I), T.sigmoid(s_D)


class GCTGate(Module):
    """Gated-channel-transformation gate: 1 + tanh(gamma * normalised(embed * |v_k|) + beta)."""

    eps = 1e-5

    def __init__(self, init: Init, c: int):
        self.embed = init.fill((c, 1, 1), 1.0)
        self.gamma = init.fill((c, 1, 1), 1.0)
        self.beta = init.fill((c, 1, 1), 0.0)

    def forward(self, v) -> Tensor:
        emb = T.mul(T.l2norm(v, axis=(-2, -1)), self.embed)
        scale = T.sqrt(T.add(T.mean(T.mul(emb, emb), axis=-3, keepdims=True), self.eps))
        return T.add(T.tanh(T.add(T.mul(self.gamma, T.div(emb, scale)), self.beta)), 1.0)


class TCA(Module):
    """Trio channel attention: global max, global mean and GCT gate, merged per channel."""

    def __init__(self, init: Init, c: int, branches=("max", "mean", "gct")):
        self.branches = tuple(branches)
        if "gct" in self.branches:
            self.gate = GCTGate(init, c)
        k = len(self.branches)
        # after the shuffle each group holds one channel's k branch values
        self.proj = Conv2d(init, k * c, c, 1, groups=c)

    def branch_vectors(self, v) -> list[Tensor]:
        vecs = []
        for name in self.branches:
            if name == "max":
                vecs.append(T.global_max_pool(v))
            elif name == "mean":
                vecs.append(T.global_avg_pool(v))
            else:
                vecs.append(self.gate(v))
        return vecs

    def forward(self, v) -> Tensor:
        vecs = self.branch_vectors(v)
        x = T.concat(vecs, axis=-3)
        if len(vecs) > 1:
            x = T.channel_shuffle(x, len(vecs))
        return self.proj(x)


class CrossModalChannel(Module):
    """Concat-shuffle-conv over the two channel descriptors, then split and squash."""

    def __init__(self, init: Init, c: int):
        self.conv = Conv2d(init, 2 * c, 2 * c, 1)

    def forward(self, t_I, t_D) -> tuple[Tensor, Tensor]:
        if t_I.shape != t_D.shape:
            raise ShapeError(f"channel descriptors differ: {t_I.shape} vs {t_D.shape}")
        x = T.channel_shuffle(T.concat([t_I, t_D], axis=-3), 2)
        c_I, c_D = T.chunk(self.conv(x), 2, axis=-3)
        return T.sigmoid(c_I), T.sigmoid(c_D)


def _calibrate(f, weight, s, c):
    if c is not None:
        f = T.broadcast_mul(c, f)
    if s is not None:
        f = T.broadcast_mul(s, f)
    if weight is not None:
        f = T.mul(weight, f)
    return f


class Fuse(Module):
    """Weight and calibrate both modalities, merge by token MLP, then merge the previous level."""

    def __init__(self, init: Init, c: int, hidden: int | None = None, c_prev: int | None = None):
        self.mlp = TokenMLP(init, 2 * c, hidden or c, c)
        self.merge = ConcatConv(init, (c, c_prev), c) if c_prev else None

    def forward(self, f_I, f_D, alpha=None, s_I=None, s_D=None, c_I=None, c_D=None, prev=None) -> Tensor:
        if f_I.shape != f_D.shape:
            raise ShapeError(f"features differ: {f_I.shape} vs {f_D.shape}")
        w_I = w_D = None
        if alpha is not None:
            w_I = T.reshape(alpha, f_I.shape[:-3] + (1, 1, 1))
            w_D = T.sub(1.0, w_I)
        out = self.mlp(T.concat([_calibrate(f_I, w_I, s_I, c_I), _calibrate(f_D, w_D, s_D, c_D)], axis=-3))
        if self.merge is not None:
            if prev is None:
                raise ShapeError("levels after the first need the previous fused output")
            prev = T.bilinear_upsample(prev, *out.shape[-2:])
            out = self.merge(out, prev)
        return out


class AttentiveFusion(Module):
    """One pyramid level of fusion; ``c_prev`` is the previous level's width (None at level 1)."""

    def __init__(self, init: Init, c: int, cfg: FusionConfig, c_prev: int | None = None):
        self.cfg = cfg
        if cfg.use_alpha:
            self.shared = SharedMean(init, c, cfg.shared_hidden, cfg.shared_mode)
        if cfg.use_tsa:
            self.tsa_I = TSA(init, c, cfg.tsa_branches)
            self.tsa_D = TSA(init, c, cfg.tsa_branches)
            self.spatial = CrossModalSpatial(init)
        if cfg.use_tca:
            self.tca_I = TCA(init, c, cfg.tca_branches)
            self.tca_D = TCA(init, c, cfg.tca_branches)
            self.channel = CrossModalChannel(init, c)
        self.fuse = Fuse(init, c, cfg.fuse_hidden, c_prev)

    def forward(self, f_I, f_D, prev=None) -> FusionState:
        cfg = self.cfg
        m_I, v_I = decompose(f_I)
        m_D, v_D = decompose(f_D)
        m_S = alpha = s_I = s_D = c_I = c_D = None
        if cfg.use_alpha:
            m_S = self.shared(m_I, m_D)
            alpha = modal_proportion(m_S, m_I, m_D)
        if cfg.use_tsa:
            s_I, s_D = self.spatial(self.tsa_I(v_I), self.tsa_D(v_D))
        if cfg.use_tca:
            c_I, c_D = self.channel(self.tca_I(v_I), self.tca_D(v_D))
        f_S = self.fuse(f_I, f_D, alpha, s_I, s_D, c_I, c_D, prev)
        return FusionState(m_I, m_D, v_I, v_D, m_S, alpha, s_I, s_D, c_I, c_D, f_S)


def fill_parameters(module: Module, value: float, match=lambda name: True) -> None:
    """Test fixture: overwrite matching parameters with a constant."""
    for name, p in module.named_parameters():
        if match(name):
            p.data[...] = value

