"""Synthetic head phantoms with two maxillary-sinus-like cavities.

Values are normalised attenuation in [0, 1]: soft tissue ~0.3, bone ~0.9,
air ~0.02.  Each cavity carries one of three states:

* HC  - air filled,
* CRS - homogeneous soft-tissue lining of random thickness along the wall,
  leaving a smooth, irregular air lumen (or none when fully opacified),
* MFB - opacification around an irregular hyperdense core (~0.85).

Generation is split into drawing parameters (:func:`draw_case_params`) and
rendering them (:func:`render_case`).  Cavity shapes are stored in a frame
whose first axis points away from the midline, so mirroring a parameter set
and rendering gives exactly the mirrored volume.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geometry import Volume

SOFT_TISSUE = 0.30
BONE = 0.90
AIR = 0.02
CORE = 0.85
DEFAULT_EXTENT_MM = 192.0
MIN_DIM = 32
# thinnest CRS lining is ~30% of the cavity radius (~6 mm at default scale)
LUMEN_MAX_RATIO = 0.7

# reference cohort per-class case counts (HC, CRS, MFB)
INTERNAL_RATIOS = (130, 128, 254)
EXTERNAL_RATIOS = (20, 18, 26)


class DiagnosisLabel(enum.IntEnum):
    HC = 0
    CRS = 1
    MFB = 2


def _label(x) -> DiagnosisLabel:
    if isinstance(x, str):
        return DiagnosisLabel[x.upper()]
    return DiagnosisLabel(int(x))


@dataclass(frozen=True)
class Shape:
    """Perturbed ellipsoid in a local frame ``(outward, y, z)``.

    A point with normalised offset ``q`` is inside when
    ``|q| < 1 + sum_m a_m ((q_hat . w_m)^2 - 1/3)``.
    """

    centre: tuple[float, float, float]  # voxel units, outward-x / y / z
    radii: tuple[float, float, float]  # voxel units
    bumps: tuple[tuple[float, float, float, float], ...] = ()  # (a, wx, wy, wz)


@dataclass(frozen=True)
class CavityParams:
    shape: Shape
    label: DiagnosisLabel
    fill: float
    core: Shape | None = None
    core_value: float = CORE
    lumen: Shape | None = None  # air pocket left inside a partial CRS fill
    air: float = AIR


@dataclass(frozen=True)
class CaseParams:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    head_radii: tuple[float, float, float]  # voxel units
    tissue: float
    skull_thickness: float
    wall_thickness: float
    left: CavityParams
    right: CavityParams

    def mirrored(self) -> "CaseParams":
        return replace(self, left=self.right, right=self.left)


@dataclass
class LabeledCase:
    volume: Volume
    left_label: DiagnosisLabel
    right_label: DiagnosisLabel
    key_slice_range: tuple[int, int]
    case_id: str
    rng_seed: int
    params: CaseParams | None = field(default=None, repr=False)

    def __post_init__(self):
        lo, hi = self.key_slice_range
        ny = self.volume.dims[1]
        if not (0 <= lo <= hi < ny):
            raise InvalidArgumentError(f"key_slice_range {self.key_slice_range} outside 0..{ny - 1}")

    @property
    def labels(self) -> tuple[DiagnosisLabel, DiagnosisLabel]:
        return self.left_label, self.right_label

    def cavity_mask(self, side: str) -> np.ndarray:
        """Boolean interior mask of the ``"left"`` or ``"right"`` cavity."""
        if self.params is None:
            raise InvalidArgumentError("case has no generation parameters")
        return cavity_mask(self.params, side)

    def core_mask(self, side: str) -> np.ndarray:
        p = self.params
        cav = p.left if side == "left" else p.right
        if cav.core is None:
            return np.zeros(p.dims, dtype=bool)
        return (_shape_distance(p, cav.core, side) < 0) & cavity_mask(p, side)

    def metadata(self) -> dict:
        return {
            **self.volume.metadata(),
            "case_id": self.case_id,
            "left_label": self.left_label.name,
            "right_label": self.right_label.name,
            "key_slice_range": list(self.key_slice_range),
            "seed": int(self.rng_seed),
        }


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def _bumps(rng: np.random.Generator, n: int, amp: float):
    out = []
    for _ in range(n):
        w = rng.normal(size=3)
        w /= np.linalg.norm(w)
        out.append((float(rng.uniform(-amp, amp)), *map(float, w)))
    return tuple(out)


def _jit(rng, value, frac=0.10):
    return float(value * rng.uniform(1.0 - frac, 1.0 + frac))


def _draw_cavity(rng: np.random.Generator, dims, label: DiagnosisLabel) -> CavityParams:
    nx, ny, nz = dims
    centre = (
        nx / 4.0 + rng.uniform(-1.0, 1.0),
        0.12 * ny + rng.uniform(-1.5, 1.5),
        rng.uniform(-1.5, 1.5),
    )
    radii = (_jit(rng, 0.11 * nx), _jit(rng, 0.14 * ny), _jit(rng, 0.13 * nz))
    shape = Shape(centre, radii, _bumps(rng, 3, 0.12))
    # drawn for every label so the stream stays aligned
    fill = _jit(rng, SOFT_TISSUE)
    core_frac = rng.uniform(0.12, 0.28)
    core_offset = rng.uniform(-0.25, 0.25, size=3)
    core_bumps = _bumps(rng, 4, 0.25)
    core_value = _jit(rng, CORE, 0.05)
    air = _jit(rng, AIR)
    # lumen/cavity radius ratio; <= 0 means complete opacification
    lumen_ratio = rng.uniform(-0.3, LUMEN_MAX_RATIO)
    lumen_bumps = _bumps(rng, 3, 0.2)
    if label == DiagnosisLabel.HC:
        return CavityParams(shape, label, air, air=air)
    if label == DiagnosisLabel.CRS:
        lumen = None
        if lumen_ratio > 0:
            lumen = Shape(centre, tuple(r * lumen_ratio for r in radii), lumen_bumps)
        return CavityParams(shape, label, fill, lumen=lumen, air=air)
    scale = core_frac ** (1.0 / 3.0)
    core = Shape(
        tuple(c + o * r for c, o, r in zip(centre, core_offset, radii)),
        tuple((r - 0.5) * scale for r in radii),  # relative to the fully interior region
        core_bumps,
    )
    return CavityParams(shape, label, fill, core, core_value, air=air)


def draw_case_params(seed: int, left, right, dims=(64, 64, 64), spacing=None) -> CaseParams:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise InvalidArgumentError(f"dims must be three integers >= {MIN_DIM}, got {dims}")
    if spacing is None:
        spacing = tuple(DEFAULT_EXTENT_MM / n for n in dims)
    elif np.isscalar(spacing):
        spacing = (float(spacing),) * 3
    left, right = _label(left), _label(right)
    head = _rng(seed, 0)
    nx, ny, nz = dims
    head_radii = (_jit(head, 0.40 * nx, 0.05), _jit(head, 0.44 * ny, 0.05), _jit(head, 0.42 * nz, 0.05))
    tissue = _jit(head, SOFT_TISSUE, 0.05)
    return CaseParams(
        dims=dims,
        spacing=tuple(float(s) for s in spacing),
        head_radii=head_radii,
        tissue=tissue,
        skull_thickness=2.0 * nx / 64.0,
        wall_thickness=1.0 * nx / 64.0,
        left=_draw_cavity(_rng(seed, 1), dims, left),
        right=_draw_cavity(_rng(seed, 2), dims, right),
    )


def _grid(dims):
    """Voxel-unit coordinates centred on the grid, exactly antisymmetric."""
    return [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in dims]


def _shape_distance(params: CaseParams, shape: Shape, side: str) -> np.ndarray:
    """Approximate signed distance (voxel units) to a perturbed ellipsoid."""
    x, y, z = _grid(params.dims)
    sign = -1.0 if side == "left" else 1.0
    qx = (sign * x - shape.centre[0]) / shape.radii[0]
    qy = (y - shape.centre[1]) / shape.radii[1]
    qz = (z - shape.centre[2]) / shape.radii[2]
    qx, qy, qz = np.meshgrid(qx, qy, qz, indexing="ij")
    rho = np.sqrt(qx**2 + qy**2 + qz**2)
    bound = np.ones_like(rho)
    if shape.bumps:
        safe = np.where(rho > 0, rho, 1.0)
        for a, wx, wy, wz in shape.bumps:
            cos = (qx * wx + qy * wy + qz * wz) / safe
            bound += a * (cos**2 - 1.0 / 3.0)
    return (rho - bound) * min(shape.radii)


def _soft(dist: np.ndarray) -> np.ndarray:
    """Partial-volume indicator of ``dist < 0`` over one voxel."""
    return np.clip(0.5 - dist, 0.0, 1.0)


def cavity_mask(params: CaseParams, side: str) -> np.ndarray:
    """Voxels entirely inside the cavity (no partial-volume wall content)."""
    cav = params.left if side == "left" else params.right
    return _shape_distance(params, cav.shape, side) <= -0.5


def render_case(params: CaseParams) -> np.ndarray:
    x, y, z = _grid(params.dims)
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    hr = params.head_radii
    rho = np.sqrt((X / hr[0]) ** 2 + (Y / hr[1]) ** 2 + (Z / hr[2]) ** 2)
    d_head = (rho - 1.0) * min(hr)
    head = _soft(d_head)
    brain = _soft(d_head + params.skull_thickness)
    vol = BONE * head + (params.tissue - BONE) * brain
    for side, cav in (("left", params.left), ("right", params.right)):
        d = _shape_distance(params, cav.shape, side)
        outer = _soft(d - params.wall_thickness)
        inner = _soft(d)
        vol = vol * (1.0 - outer) + BONE * (outer - inner) + cav.fill * inner
        if cav.lumen is not None:
            lumen = _soft(_shape_distance(params, cav.lumen, side)) * inner
            vol += (cav.air - cav.fill) * lumen
        if cav.core is not None:
            core = _soft(_shape_distance(params, cav.core, side)) * inner
            vol += (cav.core_value - cav.fill) * core
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def key_slice_range_of(params: CaseParams) -> tuple[int, int]:
    rows = np.zeros(params.dims[1], dtype=bool)
    for side in ("left", "right"):
        rows |= cavity_mask(params, side).any(axis=(0, 2))
    idx = np.flatnonzero(rows)
    if idx.size == 0:
        raise InvalidArgumentError("cavities fall outside the volume")
    return int(idx[0]), int(idx[-1])


def case_from_params(params: CaseParams, seed: int, case_id: str | None = None) -> LabeledCase:
    vol = Volume(render_case(params), params.spacing)
    return LabeledCase(
        volume=vol,
        left_label=params.left.label,
        right_label=params.right.label,
        key_slice_range=key_slice_range_of(params),
        case_id=case_id or f"case-{seed}",
        rng_seed=int(seed),
        params=params,
    )


def generate_case(seed: int, left, right, dims=(64, 64, 64), spacing=None, case_id: str | None = None) -> LabeledCase:
    """Render one labelled phantom; identical inputs give identical volumes."""
    return case_from_params(draw_case_params(seed, left, right, dims, spacing), seed, case_id)


@dataclass(frozen=True)
class DatasetSpec:
    """Per-side label counts ``(HC, CRS, MFB)``; their sum is the case count.

    Left and right labels are drawn as two independent permutations of the
    same multiset, so each side's histogram matches ``counts`` exactly.
    """

    counts: tuple[int, int, int]
    dims: tuple[int, int, int] = (64, 64, 64)
    prefix: str = "case"

    def __post_init__(self):
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise InvalidArgumentError("counts must be three non-negative integers")
        if self.total < 1:
            raise InvalidArgumentError("dataset must contain at least one case")

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    @classmethod
    def from_ratios(cls, total: int, ratios: Sequence[float] = INTERNAL_RATIOS, **kw) -> "DatasetSpec":
        """Scale ``ratios`` to ``total`` cases with largest-remainder rounding."""
        if total < 1:
            raise InvalidArgumentError("dataset must contain at least one case")
        r = np.asarray(ratios, dtype=np.float64)
        exact = r / r.sum() * total
        counts = np.floor(exact).astype(int)
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[: total - counts.sum()]] += 1
        return cls(tuple(int(c) for c in counts), **kw)


def _case_seed(seed: int, prefix: str, index: int) -> int:
    tag = int.from_bytes(hashlib.sha256(prefix.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed), tag, index]).generate_state(1)[0])


def dataset_labels(spec: DatasetSpec, seed: int) -> list[tuple[DiagnosisLabel, DiagnosisLabel]]:
    pool = np.repeat(np.arange(3), spec.counts)
    tag = int.from_bytes(hashlib.sha256(spec.prefix.encode()).digest()[:4], "little")
    rng = _rng(seed, tag, 0xA11CE)
    left = rng.permutation(pool)
    right = rng.permutation(pool)
    return [(DiagnosisLabel(int(a)), DiagnosisLabel(int(b))) for a, b in zip(left, right)]


def generate_dataset(spec: DatasetSpec, seed: int) -> list[LabeledCase]:
    cases = []
    for i, (left, right) in enumerate(dataset_labels(spec, seed)):
        cs = _case_seed(seed, spec.prefix, i)
        cases.append(generate_case(cs, left, right, spec.dims, case_id=f"{spec.prefix}-{i:04d}"))
    return cases


def sphere_volume(dims, spacing, radius_mm: float, density: float = 1.0, centre_mm=(0.0, 0.0, 0.0), supersample: int = 4) -> Volume:
    """Uniform ball with partial-volume voxels (``supersample``^3 sub-samples)."""
    dims = tuple(int(n) for n in dims)
    spacing = (float(spacing),) * 3 if np.isscalar(spacing) else tuple(float(s) for s in spacing)
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = np.zeros(dims, dtype=np.float64)
    axes = [(np.arange(n) - (n - 1) / 2.0) * s - c for n, s, c in zip(dims, spacing, centre_mm)]
    for a in sub:
        for b in sub:
            for c in sub:
                X, Y, Z = np.meshgrid(axes[0] + a * spacing[0], axes[1] + b * spacing[1], axes[2] + c * spacing[2], indexing="ij", sparse=True)
                acc += (X**2 + Y**2 + Z**2) < radius_mm**2
    return Volume((density * acc / supersample**3).astype(np.float32), spacing)
