"""Registry of finite-difference checks, one per differentiable operation.

Each case builds a function, its inputs and the parameters it closes over in
float64. ``run`` evaluates a selection and returns one row per case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import DecoderConfig, EncoderConfig, FusionConfig, ModelConfig
from .decoder import FM, LGM, MSA, Head, MultiLevel
from .encoder import DualEncoder
from .fusion import TCA, TSA, CrossModalChannel, CrossModalSpatial, Fuse, SharedMean, decompose, modal_proportion
from .gradcheck import grad_check
from .losses import divergence_loss, multilevel_loss, multiscale_loss, total_loss, wbce_iou
from .model import XMSNet
from .nn import Init
from .tensor import Tensor

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class Case:
    name: str
    block: str
    build: Callable  # rng -> (fn, inputs, params)
    tol: float = OP_TOL
    max_coords: int | None = None


def _t(rng, *shape, lo=-1.0, hi=1.0, away: float = 0.0) -> Tensor:
    x = rng.uniform(lo, hi, size=shape)
    if away:
        x = np.where(np.abs(x) < away, np.sign(x + 1e-12) * away, x)
    return Tensor(x)


def _binary(rng, *shape) -> np.ndarray:
    return (rng.uniform(size=shape) > 0.5).astype(np.float64)


def _mod(module, rng=None):
    """Module parameters; zero biases are randomised so no ReLU sits exactly on its kink."""
    params = module.parameters()
    if rng is not None:
        for q in params:
            if q.ndim == 1 and not q.data.any():
                q.data = rng.uniform(-0.2, 0.2, size=q.shape)
    return params


REGISTRY: list[Case] = []


def case(name: str, block: str, tol: float = OP_TOL, max_coords: int | None = None):
    def deco(fn):
        REGISTRY.append(Case(name, block, fn, tol, max_coords))
        return fn
    return deco


# ---------------------------------------------------------------- tensor-core

@case("matmul", "tensor-core")
def _(rng):
    return T.matmul, [_t(rng, 3, 4), _t(rng, 4, 5)], []


@case("conv2d", "tensor-core")
def _(rng):
    fn = lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)  # noqa: E731
    return fn, [_t(rng, 2, 4, 8, 8), _t(rng, 3, 4, 3, 3), _t(rng, 3)], []


@case("conv2d_grouped", "tensor-core")
def _(rng):
    fn = lambda x, w: T.conv2d(x, w, None, stride=1, padding=1, groups=2)  # noqa: E731
    return fn, [_t(rng, 4, 8, 8), _t(rng, 4, 2, 3, 3)], []


@case("max_pool2d", "tensor-core")
def _(rng):
    return lambda x: T.max_pool2d(x, 3, 1, 1), [_t(rng, 2, 4, 8, 8)], []


@case("avg_pool2d", "tensor-core")
def _(rng):
    return lambda x: T.avg_pool2d(x, 3, 2, 1), [_t(rng, 4, 8, 8)], []


@case("global_avg_pool", "tensor-core")
def _(rng):
    return T.global_avg_pool, [_t(rng, 4, 8, 8)], []


@case("global_max_pool", "tensor-core")
def _(rng):
    return T.global_max_pool, [_t(rng, 4, 8, 8)], []


@case("bilinear_upsample", "tensor-core")
def _(rng):
    return lambda x: T.bilinear_upsample(x, 8, 6), [_t(rng, 3, 4, 3)], []


@case("bilinear_downsample", "tensor-core")
def _(rng):
    return lambda x: T.bilinear_upsample(x, 3, 5), [_t(rng, 2, 8, 8)], []


@case("concat", "tensor-core")
def _(rng):
    return lambda a, b: T.concat([a, b], axis=-3), [_t(rng, 2, 4, 4), _t(rng, 3, 4, 4)], []


@case("chunk", "tensor-core")
def _(rng):
    fn = lambda x: T.concat([T.mul(p, i + 1.0) for i, p in enumerate(T.chunk(x, 3, axis=0))], 0)  # noqa: E731
    return fn, [_t(rng, 6, 4, 4)], []


@case("channel_shuffle", "tensor-core")
def _(rng):
    return lambda x: T.channel_shuffle(x, 3), [_t(rng, 6, 4, 4)], []


@case("rearrange", "tensor-core")
def _(rng):
    return lambda x: T.rearrange(x, "c h w -> (h w) c"), [_t(rng, 3, 4, 5)], []


@case("reshape_transpose", "tensor-core")
def _(rng):
    return lambda x: T.transpose(T.reshape(x, (4, 6)), (1, 0)), [_t(rng, 2, 3, 4)], []


@case("add_sub_mul_div", "tensor-core")
def _(rng):
    fn = lambda a, b: T.div(T.mul(T.add(a, b), T.sub(a, b)), b)  # noqa: E731
    return fn, [_t(rng, 3, 4), _t(rng, 3, 4, lo=0.5, hi=2.0)], []


@case("broadcast_mul", "tensor-core")
def _(rng):
    return T.broadcast_mul, [_t(rng, 1, 4, 4), _t(rng, 3, 4, 4)], []


@case("exp_log_sqrt", "tensor-core")
def _(rng):
    fn = lambda x: T.sqrt(T.log(T.add(T.exp(x), 1.0)))  # noqa: E731
    return fn, [_t(rng, 3, 4)], []


@case("sigmoid", "tensor-core")
def _(rng):
    return T.sigmoid, [_t(rng, 3, 4, lo=-4, hi=4)], []


@case("tanh", "tensor-core")
def _(rng):
    return T.tanh, [_t(rng, 3, 4, lo=-3, hi=3)], []


@case("relu", "tensor-core")
def _(rng):
    return T.relu, [_t(rng, 3, 4, away=0.05)], []


@case("softplus", "tensor-core")
def _(rng):
    return T.softplus, [_t(rng, 3, 4, lo=-5, hi=5)], []


@case("clip", "tensor-core")
def _(rng):
    x = np.array([-2.0, -0.3, 0.1, 0.45, 1.7, 3.0])
    return lambda t: T.clip(t, -1.0, 1.0), [Tensor(x)], []


@case("softmax", "tensor-core")
def _(rng):
    return lambda x: T.softmax(x, axis=-1), [_t(rng, 3, 5, lo=-3, hi=3)], []


@case("cosine_similarity", "tensor-core")
def _(rng):
    return T.cosine_similarity, [_t(rng, 2, 6), _t(rng, 2, 6)], []


@case("l2norm", "tensor-core")
def _(rng):
    return lambda x: T.l2norm(x, -3), [_t(rng, 4, 1, 1)], []


@case("sum_mean_amax", "tensor-core")
def _(rng):
    fn = lambda x: T.add(T.add(T.sum(x, 0), T.mean(x, 0)), T.amax(x, 0))  # noqa: E731
    return fn, [_t(rng, 4, 5)], []


# ---------------------------------------------------------------- encoder

@case("encode_pair", "encoder", max_coords=6)
def _(rng):
    enc = DualEncoder(Init(rng), EncoderConfig(stage_channels=(2, 2, 4, 4)))

    def fn(rgb, aux):
        outs = enc(rgb, aux)
        return T.concat([T.reshape(T.global_avg_pool(f), (-1,)) for fs in outs for f in fs], axis=0)
    return fn, [_t(rng, 3, 32, 32, lo=0, hi=1), _t(rng, 3, 32, 32, lo=0, hi=1)], _mod(enc, rng)


# ---------------------------------------------------------------- fusion-af

@case("decompose", "fusion-af")
def _(rng):
    fn = lambda f: T.concat([T.reshape(x, (-1,)) for x in decompose(f)], axis=0)  # noqa: E731
    return fn, [_t(rng, 4, 6, 6)], []


@case("shared_mean", "fusion-af")
def _(rng):
    block = SharedMean(Init(rng), 4)
    return block, [_t(rng, 4, 1, 1), _t(rng, 4, 1, 1)], _mod(block, rng)


@case("modal_proportion", "fusion-af")
def _(rng):
    base = rng.uniform(0.2, 1.0, size=(4, 1, 1))
    m = [Tensor(base + 0.3 * rng.uniform(-1, 1, size=(4, 1, 1))) for _ in range(3)]
    return modal_proportion, m, []


@case("tsa", "fusion-af")
def _(rng):
    block = TSA(Init(rng), 4)
    return block, [_t(rng, 4, 6, 6)], _mod(block, rng)


@case("cross_modal_spatial", "fusion-af")
def _(rng):
    block = CrossModalSpatial(Init(rng))
    return lambda a, b: T.concat(block(a, b), axis=-3), [_t(rng, 1, 6, 6), _t(rng, 1, 6, 6)], _mod(block, rng)


@case("tca", "fusion-af")
def _(rng):
    block = TCA(Init(rng), 4)
    return block, [_t(rng, 4, 6, 6)], _mod(block, rng)


@case("cross_modal_channel", "fusion-af")
def _(rng):
    block = CrossModalChannel(Init(rng), 4)
    return lambda a, b: T.concat(block(a, b), axis=-3), [_t(rng, 4, 1, 1), _t(rng, 4, 1, 1)], _mod(block, rng)


@case("fuse", "fusion-af")
def _(rng):
    block = Fuse(Init(rng), 4, c_prev=2)

    def fn(f_I, f_D, alpha, s_I, s_D, c_I, c_D, prev):
        return block(f_I, f_D, alpha, s_I, s_D, c_I, c_D, prev)
    inputs = [_t(rng, 4, 6, 6), _t(rng, 4, 6, 6), Tensor(np.array(0.3)),
              _t(rng, 1, 6, 6, lo=0, hi=1), _t(rng, 1, 6, 6, lo=0, hi=1),
              _t(rng, 4, 1, 1, lo=0, hi=1), _t(rng, 4, 1, 1, lo=0, hi=1), _t(rng, 2, 12, 12)]
    return fn, inputs, _mod(block, rng)


# ---------------------------------------------------------------- decoder-cfd

@case("lgm", "decoder-cfd")
def _(rng):
    block = LGM(Init(rng), 4, DecoderConfig())
    return block, [_t(rng, 4, 8, 8)], _mod(block, rng)


@case("fm", "decoder-cfd")
def _(rng):
    block = FM(Init(rng), 4, 6)
    return block, [_t(rng, 6, 4, 4), _t(rng, 4, 8, 8)], _mod(block, rng)


@case("head", "decoder-cfd")
def _(rng):
    block = Head(Init(rng), 4)
    return block, [_t(rng, 4, 6, 6)], _mod(block, rng)


@case("msa", "decoder-cfd")
def _(rng):
    block = MSA(Init(rng), 4)
    return lambda a, b, p, f: block(a, b, p, f)[0], [_t(rng, 4, 4, 4) for _ in range(2)] + [
        _t(rng, 1, 4, 4, lo=-3, hi=3), _t(rng, 4, 4, 4)], _mod(block, rng)


@case("multilevel_aggregate", "decoder-cfd", max_coords=8)
def _(rng):
    block = MultiLevel(Init(rng), (2, 2, 4, 4))

    def fn(*f_o):
        p_low, _, p_mid, _, p_high, _ = block(list(f_o))
        return T.concat([T.reshape(p, (-1,)) for p in (p_low, p_mid, p_high)], axis=0)
    inputs = [_t(rng, 2, 8, 8), _t(rng, 2, 4, 4), _t(rng, 4, 2, 2), _t(rng, 4, 1, 1)]
    return fn, inputs, _mod(block, rng)


# ---------------------------------------------------------------- losses

@case("wbce_iou", "losses")
def _(rng):
    gt = _binary(rng, 2, 1, 16, 16)
    return lambda p: wbce_iou(p, gt), [_t(rng, 2, 1, 8, 8, lo=-3, hi=3)], []


@case("multiscale_loss", "losses")
def _(rng):
    gt = _binary(rng, 1, 32, 32)
    inputs = [_t(rng, 1, 32 // s, 32 // s, lo=-3, hi=3) for s in (4, 8, 16, 32)]
    return lambda *p: multiscale_loss(p, gt), inputs, []


@case("multilevel_loss", "losses")
def _(rng):
    gt = _binary(rng, 1, 16, 16)
    inputs = [_t(rng, 1, s, s, lo=-3, hi=3) for s in (4, 8, 16)]
    return lambda a, b, c: multilevel_loss(a, b, c, gt), inputs, []


@case("divergence_loss", "losses")
def _(rng):
    return divergence_loss, [_t(rng, 1, s, s, lo=-3, hi=3) for s in (4, 8, 16)], []


@case("divergence_loss_spatial", "losses")
def _(rng):
    fn = lambda a, b, c: divergence_loss(a, b, c, mode="spatial")  # noqa: E731
    return fn, [_t(rng, 1, s, s, lo=-3, hi=3) for s in (4, 8, 16)], []


# ---------------------------------------------------------------- end-to-end

def small_config(**fusion) -> ModelConfig:
    return ModelConfig.from_dict({"encoder": {"stage_channels": [4, 4, 8, 8]}, "fusion": fusion,
                                  "precision": "f64"})


@case("total_loss", "end-to-end", tol=END_TO_END_TOL, max_coords=3)
def _(rng):
    model = XMSNet(small_config(), Init(rng))
    rgb = _t(rng, 2, 3, 32, 32, lo=0, hi=1)
    aux = _t(rng, 2, 3, 32, 32, lo=0, hi=1)
    gt = _binary(rng, 2, 1, 32, 32)
    fn = lambda r, a: total_loss(model(r, a), gt, model.cfg.loss).total  # noqa: E731
    return fn, [rgb, aux], _mod(model, rng)


BLOCKS = tuple(dict.fromkeys(c.block for c in REGISTRY))
NAMES = tuple(c.name for c in REGISTRY)


def select(selector: str = "all", cases: list[Case] | None = None) -> list[Case]:
    cases = REGISTRY if cases is None else cases
    if selector == "all":
        return list(cases)
    picked = [c for c in cases if selector in (c.block, c.name)]
    if not picked:
        raise KeyError(f"unknown gradcheck selector '{selector}'; blocks: {', '.join(BLOCKS)}")
    return picked


def run(selector: str = "all", seed: int = 0, eps: float = 1e-5, max_coords: int | None = 12,
        cases: list[Case] | None = None) -> list[dict]:
    """Evaluate the selected cases in float64; one result row per case."""
    rows = []
    with T.precision(np.float64):
        for c in select(selector, cases):
            rng = np.random.default_rng([seed, NAMES.index(c.name) if c.name in NAMES else 0])
            t0 = time.time()
            fn, inputs, params = c.build(rng)
            coords = c.max_coords if c.max_coords is not None else max_coords
            err = grad_check(fn, inputs, eps, params=params, max_coords=coords, seed=seed)
            rows.append({"block": c.block, "op": c.name, "max_rel_err": err, "tol": c.tol,
                         "passed": bool(err < c.tol), "seconds": time.time() - t0})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'block':<14}{'op':<26}{'max_rel_err':>14}{'tol':>10}  status"]
    for r in rows:
        lines.append(f"{r['block']:<14}{r['op']:<26}{r['max_rel_err']:>14.3e}{r['tol']:>10.0e}  "
                     f"{'ok' if r['passed'] else 'FAIL'}")
    return "\n".join(lines)
