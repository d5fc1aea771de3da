"""Saliency evaluation metrics: MAE, max F-measure, S-measure and E-measure.

Thresholded metrics sweep the 255 thresholds t_k = k / 255 (k = 0..254), a
pixel counting as foreground when ``pred > t_k``.
"""

from __future__ import annotations

import numpy as np

BETA2 = 0.3
S_ALPHA = 0.5
_EPS = np.spacing(1)
THRESHOLDS = np.arange(255) / 255.0


def _prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    gt = np.asarray(gt).squeeze()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ")
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("prediction must lie in [0, 1]")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.abs(pred - gt).mean())


def _counts(pred, gt):
    """TP, FP, FN, TN per threshold."""
    fg = np.sort(pred[gt])
    bg = np.sort(pred[~gt])
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="right")
    fp = bg.size - np.searchsorted(bg, THRESHOLDS, side="right")
    return tp, fp, fg.size - tp, bg.size - fp


def f_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _prepare(pred, gt)
    tp, fp, fn, _ = _counts(pred, gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(precision + recall > 0,
                     (1 + BETA2) * precision * recall / (BETA2 * precision + recall), 0.0)
    return f


def max_f_measure(pred, gt) -> float:
    return float(f_measure_curve(pred, gt).max())


def e_measure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score at each threshold."""
    pred, gt = _prepare(pred, gt)
    n = gt.size
    tp, fp, fn, tn = _counts(pred, gt)
    n_gt = gt.sum()
    if n_gt == 0:
        return (n - tp - fp) / n
    if n_gt == n:
        return (tp + fp) / n
    mu_g = n_gt / n
    mu_p = (tp + fp) / n
    total = np.zeros(THRESHOLDS.size)
    # the enhanced matrix takes one value per (pred, gt) combination
    for count, p_val, g_val in ((tp, 1, 1), (fp, 1, 0), (fn, 0, 1), (tn, 0, 0)):
        a = p_val - mu_p
        b = g_val - mu_g
        align = 2 * a * b / (a * a + b * b + _EPS)
        total += count * (align + 1) ** 2 / 4
    return total / n


def e_measure(pred, gt) -> float:
    """Mean E-measure over the threshold sweep."""
    return float(e_measure_curve(pred, gt).mean())


def _object_score(x, mask):
    vals = x[mask]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + _EPS)


def _s_object(pred, gt):
    u = gt.mean()
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1 - pred, 0.0)
    return u * _object_score(fg, gt) + (1 - u) * _object_score(bg, ~gt)


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    # 1-based centroid; ties round away from zero, not to even
    y, x = np.floor(np.argwhere(gt).mean(axis=0) + 1.5)
    return int(x), int(y)


def _ssim(pred, gt):
    n = pred.size
    x = pred.mean()
    y = gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(pred, gt):
    h, w = gt.shape
    x, y = _centroid(gt)
    x, y = min(x, w), min(y, h)
    g = gt.astype(np.float64)
    score = 0.0
    for rows, cols in (((0, y), (0, x)), ((0, y), (x, w)), ((y, h), (0, x)), ((y, h), (x, w))):
        area = (rows[1] - rows[0]) * (cols[1] - cols[0])
        if area == 0:
            continue
        sl = (slice(*rows), slice(*cols))
        score += area / (h * w) * _ssim(pred[sl], g[sl])
    return score


def s_measure(pred, gt) -> float:
    """Structure measure: 0.5 * object-aware + 0.5 * region-aware similarity."""
    pred, gt = _prepare(pred, gt)
    u = gt.mean()
    if u == 0:
        return float(1 - pred.mean())
    if u == 1:
        return float(pred.mean())
    s = S_ALPHA * _s_object(pred, gt) + (1 - S_ALPHA) * _s_region(pred, gt)
    return float(min(max(s, 0.0), 1.0))


def evaluate(pred, gt) -> dict:
    return {"mae": mae(pred, gt), "fmax": max_f_measure(pred, gt),
            "smeasure": s_measure(pred, gt), "emeasure": e_measure(pred, gt)}
