"""Circular cone-beam acquisition geometry and the voxel volume container.

Conventions
-----------
* Volume arrays are indexed ``data[i, j, k]`` with ``i`` along x (left-right),
  ``j`` along y (anterior-posterior) and ``k`` along z (the rotation axis).
  A coronal slice is ``data[:, j, :]``.
* The source orbits the z axis in the z = 0 plane.  At view angle ``theta`` the
  source sits at ``SOD * (cos theta, sin theta, 0)`` and the flat detector centre
  at ``-OID * (cos theta, sin theta, 0)``.
* Detector axes: ``u`` along ``(-sin theta, cos theta, 0)`` indexed by column,
  ``v`` along ``+z`` indexed by row.  Detector images have shape ``(rows, cols)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError


def half_scan_angles(step_deg: float, arc_deg: float) -> list[float]:
    """Evenly spaced view angles ``0, step, ..., arc - step`` in degrees.

    >>> half_scan_angles(90, 180)
    [0.0, 90.0]
    """
    if step_deg <= 0 or arc_deg <= 0:
        raise InvalidArgumentError("step_deg and arc_deg must be positive")
    ratio = arc_deg / step_deg
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise InvalidArgumentError(f"arc {arc_deg} is not a multiple of step {step_deg}")
    return [float(k * step_deg) for k in range(n)]


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular-orbit flat-panel geometry (lengths in mm, angles in degrees)."""

    source_object_distance: float = 1200.0
    object_image_distance: float = 200.0
    detector_size: float = 512.0
    detector_pixels: int = 256
    angles: tuple[float, ...] = field(default_factory=lambda: tuple(half_scan_angles(2, 180)))

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.source_object_distance <= 0:
            raise InvalidArgumentError("source_object_distance must be > 0")
        if self.object_image_distance < 0:
            raise InvalidArgumentError("object_image_distance must be >= 0")
        if self.detector_size <= 0:
            raise InvalidArgumentError("detector_size must be > 0")
        if int(self.detector_pixels) != self.detector_pixels or self.detector_pixels < 2:
            raise InvalidArgumentError("detector_pixels must be an integer >= 2")
        if not self.angles:
            raise InvalidArgumentError("at least one view angle is required")
        a = np.asarray(self.angles)
        if np.any(a < 0) or np.any(a >= 360):
            raise InvalidArgumentError("angles must lie in [0, 360)")
        if np.any(np.diff(a) <= 0):
            raise InvalidArgumentError("angles must be strictly increasing")

    @property
    def sod(self) -> float:
        return float(self.source_object_distance)

    @property
    def oid(self) -> float:
        return float(self.object_image_distance)

    @property
    def sdd(self) -> float:
        """Source-to-detector distance."""
        return self.sod + self.oid

    @property
    def magnification(self) -> float:
        return self.sdd / self.sod

    @property
    def pixel_pitch(self) -> float:
        return self.detector_size / self.detector_pixels

    @property
    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.angles, dtype=np.float64))

    @property
    def n_views(self) -> int:
        return len(self.angles)

    def angular_step_deg(self) -> float:
        """Mean spacing between consecutive views (360 for a single view)."""
        if self.n_views == 1:
            return 360.0
        return (self.angles[-1] - self.angles[0]) / (self.n_views - 1)

    def coverage_deg(self) -> float:
        """Angular range represented by the views, ``n_views * step``."""
        return self.n_views * self.angular_step_deg()

    def with_angles(self, angles: Sequence[float]) -> "ConeBeamGeometry":
        return replace(self, angles=tuple(angles))

    def to_dict(self) -> dict:
        return {
            "sod_mm": self.sod,
            "oid_mm": self.oid,
            "detector_mm": float(self.detector_size),
            "detector_px": int(self.detector_pixels),
            "angles_deg": list(self.angles),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(
            source_object_distance=float(d["sod_mm"]),
            object_image_distance=float(d["oid_mm"]),
            detector_size=float(d["detector_mm"]),
            detector_pixels=int(d["detector_px"]),
            angles=tuple(d["angles_deg"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ConeBeamGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def detector_coords(geometry: ConeBeamGeometry, row: int, col: int) -> tuple[float, float]:
    """Physical ``(u, v)`` position in mm of a detector pixel centre.

    ``u`` follows the column index and ``v`` the row index; the detector
    midpoint is the origin so pixel ``(r, c)`` and ``(n-1-r, n-1-c)`` are
    mirror images.
    """
    n = geometry.detector_pixels
    if not (0 <= row < n and 0 <= col < n):
        raise InvalidArgumentError(f"detector index ({row}, {col}) outside 0..{n - 1}")
    pitch = geometry.pixel_pitch
    centre = (n - 1) / 2.0
    return ((col - centre) * pitch, (row - centre) * pitch)


def detector_axis(geometry: ConeBeamGeometry) -> np.ndarray:
    """Pixel-centre coordinates along one detector axis (same for u and v)."""
    n = geometry.detector_pixels
    return (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * geometry.pixel_pitch


@dataclass
class Volume:
    """Scalar voxel grid with physical placement (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidArgumentError("spacing must be three positive lengths")
        if self.origin is None:
            self.origin = centred_origin(self.data.shape, self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.data.shape[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n, dtype=np.float64)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)

    def mirrored(self) -> "Volume":
        """Reflect left-right (about the physical x midline of the grid)."""
        return self.with_data(self.data[::-1].copy())

    def metadata(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
        }


def centred_origin(dims, spacing) -> tuple[float, float, float]:
    """Origin that places the grid centre at the rotation axis."""
    return tuple(-(n - 1) / 2.0 * s for n, s in zip(dims, spacing))


def volume_fits(volume: Volume, geometry: ConeBeamGeometry) -> int | None:
    """Return the index of the first view whose detector misses part of the
    volume bounding box, or ``None`` when every view sees all of it.

    Checking the eight corners is sufficient: perspective projection maps the
    convex box into the convex hull of the projected corners.
    """
    lo = np.asarray(volume.origin) - 0.5 * np.asarray(volume.spacing)
    hi = lo + np.asarray(volume.dims) * np.asarray(volume.spacing)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    half = geometry.detector_size / 2.0
    for idx, theta in enumerate(geometry.angles_rad):
        c, s = math.cos(theta), math.sin(theta)
        a = corners[:, 0] * c + corners[:, 1] * s
        t = -corners[:, 0] * s + corners[:, 1] * c
        depth = geometry.sod - a
        if np.any(depth <= 0):
            return idx
        scale = geometry.sdd / depth
        if np.any(np.abs(t * scale) > half) or np.any(np.abs(corners[:, 2] * scale) > half):
            return idx
    return None
