"""Two-stage sinus diagnosis: key-slice selection, then per-side 3-class labels.

Both stages are standardised linear models over hand-crafted features
(:mod:`.features`), trained on cross-entropy.  ``diagnose`` chains them;
``occlusion_saliency`` gives a model-agnostic relevance map.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, NoSinusFoundError, TrainingFailureError
from ..geometry import Volume
from ..io import load_weights, save_weights
from ..phantom import DiagnosisLabel
from .features import (
    SIDE_FEATURE_NAMES,
    SLICE_FEATURE_NAMES,
    CavityROI,
    side_features,
    slice_features,
)
from .models import FitConfig, LinearSoftmax, fit_softmax, softmax_loss_grad

FORMAT_VERSION = 1
N_CLASSES = len(DiagnosisLabel)


def _feature_hash(names, extra: dict | None = None) -> str:
    text = ",".join(names) + repr(sorted((extra or {}).items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def volume_slice_features(vol: Volume) -> np.ndarray:
    """Selector features for every coronal slice, shape ``(ny, F)``."""
    return np.stack([slice_features(vol.data[:, j, :]) for j in range(vol.dims[1])])


@dataclass
class KeySliceSelector:
    model: LinearSoftmax
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError("threshold must lie in (0, 1)")

    def slice_probabilities(self, vol: Volume) -> np.ndarray:
        return self.model.predict_proba(volume_slice_features(vol))[:, 1]

    def classify_slices(self, vol: Volume) -> np.ndarray:
        return self.slice_probabilities(vol) >= self.threshold


def _best_threshold(prob: np.ndarray, truth: np.ndarray) -> float:
    best, best_t = -1.0, 0.5
    for t in np.round(np.linspace(0.05, 0.95, 91), 2):
        pred = prob >= t
        tp = np.sum(pred & truth)
        denom = pred.sum() + truth.sum()
        f1 = 2.0 * tp / denom if denom else 0.0
        if f1 > best + 1e-12 or (abs(f1 - best) <= 1e-12 and abs(t - 0.5) < abs(best_t - 0.5)):
            best, best_t = f1, float(t)
    return best_t


def train_selector(cases, config: FitConfig = FitConfig()) -> KeySliceSelector:
    """Fit the key-slice classifier on ``(volume, (lo, hi))`` pairs.

    Every coronal slice is one sample, positive inside the inclusive range.
    The decision threshold maximises slice-level F1 on the training data.
    """
    if len(cases) == 0:
        raise InvalidArgumentError("train_selector needs at least one case")
    X, y = [], []
    for vol, (lo, hi) in cases:
        X.append(volume_slice_features(vol))
        lab = np.zeros(vol.dims[1], dtype=np.int64)
        lab[lo : hi + 1] = 1
        y.append(lab)
    X = np.concatenate(X)
    y = np.concatenate(y)
    if np.unique(y).size < 2:
        raise TrainingFailureError("selector training data contains a single class")
    model = fit_softmax(X, y, 2, config)
    threshold = _best_threshold(model.predict_proba(X)[:, 1], y.astype(bool))
    return KeySliceSelector(model, threshold)


def longest_run(mask: np.ndarray) -> tuple[int, int] | None:
    """Inclusive bounds of the longest run of True (earliest wins ties)."""
    best = None
    start = None
    for i, m in enumerate(list(mask) + [False]):
        if m and start is None:
            start = i
        elif not m and start is not None:
            if best is None or (i - 1 - start) > (best[1] - best[0]):
                best = (start, i - 1)
            start = None
    return best


def select_key_slices(selector: KeySliceSelector, vol: Volume) -> tuple[int, int]:
    run = longest_run(selector.classify_slices(vol))
    if run is None:
        raise NoSinusFoundError("no coronal slice classified as containing a sinus")
    return run


def key_substack(vol: Volume, interval: tuple[int, int]) -> Volume:
    lo, hi = interval
    origin = list(vol.origin)
    origin[1] += lo * vol.spacing[1]
    return Volume(vol.data[:, lo : hi + 1, :], vol.spacing, tuple(origin))


def split_sides(sub: Volume) -> tuple[Volume, Volume]:
    """Split at the sagittal midline into (left, right) halves.

    Left is the low-x half and takes the extra column when the width is odd.
    Each half's x origin is reset so that the half is centred on x = 0.
    """
    nx = sub.dims[0]
    if nx < 2:
        raise InvalidArgumentError("width must be at least 2 to split")
    cut = (nx + 1) // 2
    halves = []
    for data in (sub.data[:cut], sub.data[cut:]):
        origin = (-(data.shape[0] - 1) / 2.0 * sub.spacing[0], sub.origin[1], sub.origin[2])
        halves.append(Volume(np.ascontiguousarray(data), sub.spacing, origin))
    return halves[0], halves[1]


@dataclass
class SideClassifier:
    model: LinearSoftmax
    roi: CavityROI = field(default_factory=CavityROI)

    def features(self, sub) -> np.ndarray:
        data = sub.data if isinstance(sub, Volume) else np.asarray(sub)
        return side_features(data, self.roi)

    def predict_proba(self, sub) -> np.ndarray:
        return self.model.predict_proba(self.features(sub)[None])[0]

    def log_proba(self, sub) -> np.ndarray:
        z = self.model.logits(self.features(sub)[None])[0]
        z = z - z.max()
        return z - np.log(np.exp(z).sum())


def train_side_classifier(samples, config: FitConfig = FitConfig(), roi: CavityROI = CavityROI()) -> SideClassifier:
    """Softmax regression over cavity-region features of ``(sub_volume, label)``."""
    if len(samples) == 0:
        raise InvalidArgumentError("train_side_classifier needs samples")
    clf = SideClassifier(None, roi)
    X = np.stack([clf.features(s) for s, _ in samples])
    y = np.array([int(l) for _, l in samples])
    clf.model = fit_softmax(X, y, N_CLASSES, config)
    return clf


def severe_argmax(p: np.ndarray) -> int:
    """Argmax with ties resolved toward the higher (more severe) label."""
    p = np.asarray(p)
    return int(np.flatnonzero(p == p.max())[-1])


@dataclass
class Diagnosis:
    left_probs: np.ndarray
    right_probs: np.ndarray
    interval: tuple[int, int]
    weights_version: str = ""
    input_hash: str = ""

    @property
    def left_label(self) -> DiagnosisLabel:
        return DiagnosisLabel(severe_argmax(self.left_probs))

    @property
    def right_label(self) -> DiagnosisLabel:
        return DiagnosisLabel(severe_argmax(self.right_probs))

    def to_dict(self) -> dict:
        return {
            "left": {"label": self.left_label.name, "probabilities": dict(zip([l.name for l in DiagnosisLabel], map(float, self.left_probs)))},
            "right": {"label": self.right_label.name, "probabilities": dict(zip([l.name for l in DiagnosisLabel], map(float, self.right_probs)))},
            "slice_interval": list(self.interval),
            "provenance": {"weights_version": self.weights_version, "input_sha256": self.input_hash},
        }


def volume_hash(vol: Volume) -> str:
    return hashlib.sha256(np.ascontiguousarray(vol.data, dtype="<f4").tobytes()).hexdigest()


def diagnose(selector: KeySliceSelector, classifier: SideClassifier, vol: Volume, weights_version: str = "") -> Diagnosis:
    interval = select_key_slices(selector, vol)
    left, right = split_sides(key_substack(vol, interval))
    return Diagnosis(
        classifier.predict_proba(left),
        classifier.predict_proba(right),
        interval,
        weights_version or f"v{FORMAT_VERSION}",
        volume_hash(vol),
    )


def _patch_starts(n: int, p: int, stride: int) -> list[int]:
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def occlusion_saliency(classifier: SideClassifier, sub, patch) -> np.ndarray:
    """Occlusion sensitivity map in [0, 1].

    Patches of size ``patch`` slide with stride ``patch // 2``; each is filled
    with the sub-volume mean and the drop in the originally predicted class
    probability is spread over the patch voxels.  Drops are taken in log
    space so that saturated (p == 1.0) predictions still rank patches.  Voxels average the drops of
    all patches covering them, then the map is min-max normalised (a flat map
    becomes all zeros).
    """
    data = np.asarray(sub.data if isinstance(sub, Volume) else sub, dtype=np.float64)
    patch = tuple(int(p) for p in patch)
    if len(patch) != 3 or any(p < 1 for p in patch):
        raise InvalidArgumentError("patch must be three positive sizes")
    if any(p > n for p, n in zip(patch, data.shape)):
        raise InvalidArgumentError(f"patch {patch} larger than volume {data.shape}")
    base = classifier.log_proba(data)
    cls = severe_argmax(base)
    fill = data.mean()
    acc = np.zeros_like(data)
    cnt = np.zeros_like(data)
    strides = [max(p // 2, 1) for p in patch]
    for x0 in _patch_starts(data.shape[0], patch[0], strides[0]):
        for y0 in _patch_starts(data.shape[1], patch[1], strides[1]):
            for z0 in _patch_starts(data.shape[2], patch[2], strides[2]):
                sl = (slice(x0, x0 + patch[0]), slice(y0, y0 + patch[1]), slice(z0, z0 + patch[2]))
                occluded = data.copy()
                occluded[sl] = fill
                drop = base[cls] - classifier.log_proba(occluded)[cls]
                acc[sl] += drop
                cnt[sl] += 1
    sal = acc / cnt
    lo, hi = sal.min(), sal.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(sal)
    return (sal - lo) / (hi - lo)


def saliency_peak(sal: np.ndarray, atol: float = 1e-9) -> tuple[int, ...]:
    """Location of the saliency maximum.

    Patch averaging makes the maximum a plateau of voxels; the plateau voxel
    nearest its centroid is returned rather than the plateau's first corner.
    """
    sal = np.asarray(sal)
    idx = np.argwhere(sal >= sal.max() - atol)
    d = np.sum((idx - idx.mean(axis=0)) ** 2, axis=1)
    return tuple(int(i) for i in idx[int(np.argmin(d))])


def save_models(path, selector: KeySliceSelector, classifier: SideClassifier, meta: dict | None = None) -> None:
    header = {
        "format": "cbctcad-diagnosis",
        "version": FORMAT_VERSION,
        "class_order": [l.name for l in DiagnosisLabel],
        "selector": {"features": list(SLICE_FEATURE_NAMES), "feature_hash": _feature_hash(SLICE_FEATURE_NAMES), "threshold": selector.threshold},
        "classifier": {
            "features": list(SIDE_FEATURE_NAMES),
            "feature_hash": _feature_hash(SIDE_FEATURE_NAMES, classifier.roi.as_dict()),
            "roi": classifier.roi.as_dict(),
        },
        "standardization": "z-score with training-set mean/scale stored as <model>.mean / <model>.scale",
        "meta": meta or {},
    }
    save_weights(path, header, {**selector.model.arrays("selector"), **classifier.model.arrays("classifier")})


def load_models(path) -> tuple[KeySliceSelector, SideClassifier, dict]:
    header, arrays = load_weights(path)
    if header.get("format") != "cbctcad-diagnosis":
        raise InvalidArgumentError(f"{path} is not a diagnosis model file")
    if header["class_order"] != [l.name for l in DiagnosisLabel]:
        raise InvalidArgumentError("class order mismatch")
    if header["selector"]["feature_hash"] != _feature_hash(SLICE_FEATURE_NAMES):
        raise InvalidArgumentError("selector feature specification changed")
    roi = CavityROI(**header["classifier"]["roi"])
    if header["classifier"]["feature_hash"] != _feature_hash(SIDE_FEATURE_NAMES, roi.as_dict()):
        raise InvalidArgumentError("classifier feature specification changed")
    sel = KeySliceSelector(LinearSoftmax.from_arrays(arrays, "selector"), header["selector"]["threshold"])
    clf = SideClassifier(LinearSoftmax.from_arrays(arrays, "classifier"), roi)
    return sel, clf, header


__all__ = [
    "CavityROI",
    "Diagnosis",
    "FitConfig",
    "KeySliceSelector",
    "SideClassifier",
    "diagnose",
    "key_substack",
    "longest_run",
    "occlusion_saliency",
    "saliency_peak",
    "save_models",
    "load_models",
    "select_key_slices",
    "side_features",
    "slice_features",
    "softmax_loss_grad",
    "split_sides",
    "train_selector",
    "train_side_classifier",
    "volume_slice_features",
]
