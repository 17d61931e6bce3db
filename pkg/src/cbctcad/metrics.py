"""Classification and image-quality metrics.

Confusion matrices are indexed ``[truth, prediction]`` in DiagnosisLabel
order.  Any 0/0 ratio (precision, sensitivity, F1) is defined as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, UndefinedAUCError

N_CLASSES = 3
# per-scale weights of the five-scale MS-SSIM; a k-scale variant uses the
# first k renormalised
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[int(t), int(p)] += 1
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise InvalidArgumentError("confusion matrix must be square")
    if np.any(cm < 0):
        raise InvalidArgumentError("confusion matrix entries must be non-negative")
    if cm.sum() <= 0:
        raise InvalidArgumentError("confusion matrix is empty")
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


@dataclass(frozen=True)
class ClassMetrics:
    precision: np.ndarray
    sensitivity: np.ndarray
    f1: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_sensitivity(self) -> float:
        return float(self.sensitivity.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def per_class_prf(cm) -> ClassMetrics:
    """One-vs-rest precision, sensitivity and F1 per class plus macro means.

    Precision uses ``TP / (TP + FP)``.
    """
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
    return ClassMetrics(precision, sensitivity, f1)


def roc_curve(truth, scores):
    """ROC points over every distinct threshold, from (0, 0) to (1, 1)."""
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(t)[cut]
    fps = (cut + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr, s[cut]


def roc_auc(truth, scores) -> float:
    """Trapezoidal area under the ROC curve.

    Tied scores produce a diagonal ROC segment, so each tied positive/negative
    pair contributes one half, matching the Mann-Whitney statistic.
    """
    fpr, tpr, _ = roc_curve(truth, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def multiclass_auc(truth, probs) -> tuple[float, float]:
    """``(micro, macro)`` one-vs-rest AUC for ``probs`` of shape ``(n, C)``."""
    truth = np.asarray(truth, dtype=int)
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[1]
    present = np.bincount(truth, minlength=n_classes)
    if np.any(present == 0):
        missing = [int(c) for c in np.flatnonzero(present == 0)]
        raise UndefinedAUCError(f"classes {missing} absent from truth labels")
    onehot = np.eye(n_classes, dtype=int)[truth]
    macro = float(np.mean([roc_auc(onehot[:, c], probs[:, c]) for c in range(n_classes)]))
    micro = roc_auc(onehot.ravel(), probs.ravel())
    return micro, macro


def psnr(ref, test, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs match."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise InvalidArgumentError(f"shape mismatch {ref.shape} vs {test.shape}")
    if data_range <= 0:
        raise InvalidArgumentError("data_range must be positive")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _ssim_maps(x, y, data_range, sigma=1.5, radius=5):
    truncate = radius / sigma
    blur = lambda a: ndimage.gaussian_filter(a, sigma, truncate=truncate, mode="reflect")
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    luminance = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return luminance, cs


def _crop_mean(a, radius):
    return float(a[radius:-radius, radius:-radius].mean())


def ssim(ref, test, data_range: float = 1.0, scales: int = 1) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use population (co)variances and the mean excludes the
    5-pixel border the window cannot cover.  ``scales > 1`` gives the
    multiscale variant: contrast-structure terms at each scale, luminance at
    the coarsest, combined with renormalised standard weights.
    """
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(test, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise InvalidArgumentError("ssim expects 2-D images")
    radius = 5
    min_side = (2 * radius + 1) * 2 ** (scales - 1)
    if min(x.shape) < min_side:
        raise InvalidArgumentError(f"images must be at least {min_side} pixels per side")
    if scales == 1:
        lum, cs = _ssim_maps(x, y, data_range)
        return _crop_mean(lum * cs, radius)
    if not 1 < scales <= len(MS_SSIM_WEIGHTS):
        raise InvalidArgumentError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
    w = np.asarray(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    value = 1.0
    for k in range(scales):
        lum, cs = _ssim_maps(x, y, data_range)
        term = _crop_mean(lum * cs if k == scales - 1 else cs, radius)
        value *= max(term, 0.0) ** w[k]
        if k < scales - 1:
            x = _downsample(x)
            y = _downsample(y)
    return float(value)


def _downsample(a):
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def mean_sd(values) -> tuple[float, float]:
    """Mean and population standard deviation; infinities pass through."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidArgumentError("no values")
    if np.any(np.isinf(v)):
        return float(np.mean(v)), 0.0 if np.all(v == v[0]) else math.nan
    return float(v.mean()), float(v.std())
