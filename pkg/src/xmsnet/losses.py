"""Training objective: boundary-weighted BCE + IoU per prediction, multi-scale and
multi-level supervision, and symmetric-KL consistency across the grouped outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import LossWeights
from .tensor import ShapeError, Tensor

KL_EPS = 1e-6


def _as_array(gt) -> np.ndarray:
    return gt.data if isinstance(gt, Tensor) else np.asarray(gt)


def check_binary(gt: np.ndarray) -> None:
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary (0/1)")


def downsample_mask(gt, h: int, w: int) -> np.ndarray:
    """Area-average ``gt`` down to ``h x w`` and re-binarise at 0.5."""
    gt = _as_array(gt)
    H, W = gt.shape[-2:]
    if (H, W) == (h, w):
        return gt
    if H % h or W % w:
        raise ShapeError(f"cannot area-downsample {H}x{W} to {h}x{w}")
    fy, fx = H // h, W // w
    blocks = gt.reshape(gt.shape[:-2] + (h, fy, w, fx)).mean(axis=(-3, -1))
    return (blocks >= 0.5).astype(gt.dtype)


def boundary_weight(gt: np.ndarray, window: int = 15) -> np.ndarray:
    """Pixel weights 1 + 5 |avgpool(gt) - gt|, largest near object boundaries."""
    with T.no_grad():
        pooled = T.avg_pool2d(Tensor(gt), window, 1, window // 2).data
    return 1.0 + 5.0 * np.abs(pooled - gt)


def wbce_iou_terms(logits, gt, window: int = 15, smooth: float = 1.0) -> tuple[Tensor, Tensor]:
    """Weighted BCE and weighted soft-IoU loss, each averaged over the batch.

    ``smooth`` is added to the IoU numerator and denominator so that an empty
    mask predicted empty costs nothing.
    """
    logits = T.as_tensor(logits)
    gt = _as_array(gt).astype(logits.dtype, copy=False)
    check_binary(gt)
    if gt.ndim != logits.ndim:
        raise ShapeError(f"prediction {logits.shape} and mask {gt.shape} ranks differ")
    gt = downsample_mask(gt, *logits.shape[-2:])
    if gt.shape != logits.shape:
        gt = np.broadcast_to(gt, logits.shape)
    wt = boundary_weight(gt, window)
    axes = (-3, -2, -1)
    g = Tensor(gt)
    w = Tensor(wt)
    bce = T.sub(T.softplus(logits), T.mul(logits, g))
    wbce = T.div(T.sum(T.mul(w, bce), axes), Tensor(wt.sum(axis=axes)))
    p = T.sigmoid(logits)
    pg = T.mul(p, g)
    inter = T.sum(T.mul(w, pg), axes)
    union = T.sum(T.mul(w, T.sub(T.add(p, g), pg)), axes)
    iou = T.sub(1.0, T.div(T.add(inter, smooth), T.add(union, smooth)))
    return T.mean(wbce), T.mean(iou)


def wbce_iou(logits, gt, window: int = 15, smooth: float = 1.0) -> Tensor:
    wbce, iou = wbce_iou_terms(logits, gt, window, smooth)
    return T.add(wbce, iou)


def multiscale_loss(preds, gt, weights: LossWeights | None = None) -> Tensor:
    """Sum of lambda_i * L(p_i, G_i) over the four initial predictions."""
    weights = weights or LossWeights()
    if len(preds) != 4 or any(p is None for p in preds):
        raise ShapeError("multi-scale loss needs four predictions")
    total = None
    for lam, p in zip(weights.lambdas, preds):
        term = T.mul(wbce_iou(p, gt, weights.weight_window), lam)
        total = term if total is None else T.add(total, term)
    return total


def multilevel_loss(p_low, p_mid, p_high, gt, weights: LossWeights | None = None) -> Tensor:
    weights = weights or LossWeights()
    if p_low is None or p_mid is None or p_high is None:
        raise ShapeError("multi-level loss needs low, mid and high predictions")
    win = weights.weight_window
    return T.add(T.add(wbce_iou(p_low, gt, win), T.mul(wbce_iou(p_mid, gt, win), weights.beta1)),
                 T.mul(wbce_iou(p_high, gt, win), weights.beta2))


def _bernoulli_kl(qa: Tensor, qb: Tensor) -> Tensor:
    return T.add(T.mul(qa, T.log(T.div(qa, qb))),
                 T.mul(T.sub(1.0, qa), T.log(T.div(T.sub(1.0, qa), T.sub(1.0, qb)))))


def symmetric_kl(a, b, eps: float = KL_EPS, mode: str = "bernoulli") -> Tensor:
    """KL(A||B) + KL(B||A) between two logit maps, the coarser resized to the finer."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[-1] < b.shape[-1]:
        a = T.bilinear_upsample(a, *b.shape[-2:])
    elif b.shape[-1] < a.shape[-1]:
        b = T.bilinear_upsample(b, *a.shape[-2:])
    if mode == "bernoulli":
        qa = T.clip(T.sigmoid(a), eps, 1 - eps)
        qb = T.clip(T.sigmoid(b), eps, 1 - eps)
        return T.mean(T.add(_bernoulli_kl(qa, qb), _bernoulli_kl(qb, qa)))
    # spatial mode: one distribution over pixels per map
    lead = a.shape[:-3]
    n = int(np.prod(a.shape[-3:]))
    pa = T.clip(T.softmax(T.reshape(a, lead + (n,)), -1), eps, 1.0)
    pb = T.clip(T.softmax(T.reshape(b, lead + (n,)), -1), eps, 1.0)
    diff = T.sub(T.log(pa), T.log(pb))
    return T.mean(T.sum(T.mul(T.sub(pa, pb), diff), axis=-1))


def divergence_loss(p_low, p_mid, p_high, eps: float = KL_EPS, mode: str = "bernoulli") -> Tensor:
    return T.add(symmetric_kl(p_low, p_mid, eps, mode), symmetric_kl(p_mid, p_high, eps, mode))


@dataclass
class LossReport:
    total: Tensor
    ms: float
    ml: float
    div: float
    wbce: float
    iou: float
    per_layer: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def row(self) -> dict:
        out = {"total": self.value, "ms": self.ms, "ml": self.ml, "div": self.div,
               "wbce": self.wbce, "iou": self.iou}
        out.update({f"L_{k}": v for k, v in self.per_layer.items()})
        return out


def total_loss(out, gt, weights: LossWeights | None = None) -> LossReport:
    """L_all = L_ms + gamma1 * L_ml + gamma2 * L_div for one PredictionPyramid."""
    weights = weights or LossWeights()
    win = weights.weight_window
    per_layer = {}
    wbce_sum = iou_sum = 0.0
    ms = None
    for i, (lam, p) in enumerate(zip(weights.lambdas, out.p)):
        bw, iw = wbce_iou_terms(p, gt, win)
        term = T.add(bw, iw)
        per_layer[f"p{i + 1}"] = float(term.data)
        wbce_sum += lam * float(bw.data)
        iou_sum += lam * float(iw.data)
        ms = T.mul(term, lam) if ms is None else T.add(ms, T.mul(term, lam))
    total = ms
    ml_v = div_v = 0.0
    if out.p_high is not None:
        ml = None
        for name, p, coef in (("low", out.p_low, 1.0), ("mid", out.p_mid, weights.beta1),
                              ("high", out.p_high, weights.beta2)):
            bw, iw = wbce_iou_terms(p, gt, win)
            term = T.add(bw, iw)
            per_layer[name] = float(term.data)
            wbce_sum += weights.gamma1 * coef * float(bw.data)
            iou_sum += weights.gamma1 * coef * float(iw.data)
            ml = T.mul(term, coef) if ml is None else T.add(ml, T.mul(term, coef))
        div = divergence_loss(out.p_low, out.p_mid, out.p_high, mode=weights.kl_mode)
        total = T.add(T.add(total, T.mul(ml, weights.gamma1)), T.mul(div, weights.gamma2))
        ml_v, div_v = float(ml.data), float(div.data)
    return LossReport(total=total, ms=float(ms.data), ml=ml_v, div=div_v,
                      wbce=wbce_sum, iou=iou_sum, per_layer=per_layer)
