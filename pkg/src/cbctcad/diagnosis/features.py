"""Hand-crafted features for the key-slice selector and side classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

N_BINS = 16
LOW_THRESHOLD = 0.1
HIGH_THRESHOLD = 0.6

SLICE_FEATURE_NAMES = tuple(f"hist{i:02d}" for i in range(N_BINS)) + (
    "mean",
    "variance",
    "low_fraction",
    "gradient_mean",
)


def histogram(values: np.ndarray) -> np.ndarray:
    """Fraction of values in 16 equal bins over [0, 1]; outliers go to the end bins."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    idx = np.minimum((v * N_BINS).astype(np.int64), N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS) / max(v.size, 1)


def slice_features(image: np.ndarray) -> np.ndarray:
    """Selector features of one coronal slice, ordered as SLICE_FEATURE_NAMES.

    Every entry is invariant to mirroring the slice along either axis.
    """
    a = np.asarray(image, dtype=np.float64)
    gx, gy = np.gradient(a)
    return np.concatenate(
        [
            histogram(a),
            [a.mean(), a.var(), np.mean(a < LOW_THRESHOLD), np.mean(np.hypot(gx, gy))],
        ]
    )


@dataclass(frozen=True)
class CavityROI:
    """Central box of a half sub-volume, as fractions of each extent.

    Each value is the half-width of the box divided by the axis length.
    """

    x: float = 0.25
    y: float = 0.5
    z: float = 0.15

    def slices(self, shape) -> tuple[slice, slice, slice]:
        out = []
        for n, frac in zip(shape, (self.x, self.y, self.z)):
            c = (n - 1) / 2.0
            h = max(frac * n, 0.5)
            lo = int(np.floor(c - h + 0.5))
            hi = int(np.ceil(c + h - 0.5)) + 1
            out.append(slice(max(lo, 0), min(max(hi, lo + 1), n)))
        return tuple(out)

    def as_dict(self) -> dict:
        return asdict(self)


SIDE_FEATURE_NAMES = ("mean", "variance", "max", "high_fraction") + tuple(f"hist{i:02d}" for i in range(N_BINS))


def side_features(sub: np.ndarray, roi: CavityROI = CavityROI()) -> np.ndarray:
    """Cavity-region statistics of one half sub-volume (SIDE_FEATURE_NAMES order)."""
    region = np.asarray(sub, dtype=np.float64)[roi.slices(sub.shape)]
    return np.concatenate(
        [
            [region.mean(), region.var(), region.max(), np.mean(region > HIGH_THRESHOLD)],
            histogram(region),
        ]
    )
