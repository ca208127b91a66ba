"""Evaluation metrics: PSNR, SSIM, depth rel / inlier ratio, mIoU and accuracy."""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import default
from .exceptions import DimensionMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DEPTH_VALID_ALPHA = 0.5


def tau_threshold():
    return default("metrics", "tau_threshold")


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionMismatchError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def psnr(pred, gt):
    """Peak signal-to-noise ratio in dB for data in [0, 1]; ``inf`` when identical."""
    p, g = _pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    k = w.size
    rows = sliding_window_view(img, k, axis=0) @ w
    return sliding_window_view(rows, k, axis=1) @ w


def ssim(pred, gt, data_range=1.0):
    """Mean SSIM over all valid 11x11 Gaussian-window positions, averaged over channels."""
    p, g = _pair(pred, gt)
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    if p.shape[0] < SSIM_WINDOW or p.shape[1] < SSIM_WINDOW:
        raise DimensionMismatchError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    w = gaussian_window()
    scores = []
    for ch in range(p.shape[2]):
        x, y = p[..., ch], g[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def depth_validity(alpha, gt_depth):
    """Pixels with rendered alpha > 0.5 and a finite positive ground-truth depth."""
    a = np.asarray(alpha, dtype=np.float64)
    g = np.asarray(gt_depth, dtype=np.float64)
    return (a.reshape(g.shape) > DEPTH_VALID_ALPHA) & np.isfinite(g) & (g > 0)


def depth_metrics(pred_depth, gt_depth, valid_mask=None, threshold=None):
    """Absolute relative error and inlier ratio, both in percent.

    Only pixels in ``valid_mask`` with finite positive ground truth count.
    Returns ``(nan, nan)`` when no pixel is valid.
    """
    p, g = _pair(pred_depth, gt_depth)
    threshold = tau_threshold() if threshold is None else threshold
    valid = np.isfinite(g) & (g > 0)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool).reshape(g.shape)
    if not valid.any():
        return math.nan, math.nan
    p, g = p[valid], g[valid]
    rel = 100.0 * float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    tau = 100.0 * float(np.mean(ratio < threshold))
    return rel, tau


def confusion_matrix(pred_labels, gt_labels, num_classes):
    """Counts ``[gt, pred]`` over pixels whose gt is a real class.

    Predicted labels outside ``[0, num_classes)`` (void) land in an extra
    last column so they count as misses.
    """
    p = np.asarray(pred_labels).astype(np.int64).ravel()
    g = np.asarray(gt_labels).astype(np.int64).ravel()
    if p.shape != g.shape:
        raise DimensionMismatchError(f"label maps differ in size: {p.size} vs {g.size}")
    keep = (g >= 0) & (g < num_classes)
    p, g = p[keep], g[keep]
    p = np.where((p >= 0) & (p < num_classes), p, num_classes)
    cm = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    np.add.at(cm, (g, p), 1)
    return cm


def seg_metrics(pred_labels, gt_labels, num_classes):
    """``(miou, acc, per_class_iou)``; gt-void pixels are excluded, mIoU averages gt-present classes."""
    cm = confusion_matrix(pred_labels, gt_labels, num_classes)
    total = int(cm.sum())
    if total == 0:
        return math.nan, math.nan, {}
    tp = np.diag(cm[:, :num_classes])
    fn = cm.sum(axis=1) - tp
    fp = cm[:, :num_classes].sum(axis=0) - tp
    per_class = {}
    for c in range(num_classes):
        denom = tp[c] + fp[c] + fn[c]
        if denom:
            per_class[c] = float(tp[c] / denom)
    present = [c for c in range(num_classes) if cm[c].sum() > 0]
    miou = float(np.mean([per_class[c] for c in present]))
    acc = float(tp.sum() / total)
    return miou, acc, per_class


@dataclass
class MetricReport:
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    rel: Optional[float] = None
    tau: Optional[float] = None
    miou: Optional[float] = None
    acc: Optional[float] = None
    per_class_iou: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        def enc(v):
            if v is None:
                return None
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, float) and math.isnan(v):
                return None
            return v
        out = {k: enc(getattr(self, k)) for k in ("psnr", "ssim", "rel", "tau", "miou", "acc")}
        out["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return out
