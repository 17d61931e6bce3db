"""Feldkamp-Davis-Kress reconstruction for the circular flat-panel geometry.

Pipeline: cosine pre-weighting, row-wise ramp filtering, distance-weighted
voxel-driven backprojection.  Weighting and filtering work in physical
detector coordinates; the backprojection rescales to the virtual detector
through the rotation axis, which is where the textbook normalisation lives.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import InsufficientCoverageError, InvalidArgumentError
from .geometry import ConeBeamGeometry, Volume, centred_origin, detector_axis
from .projector import ProjectionSet, forward_project

WINDOWS = ("ram-lak", "hann")
MIN_COVERAGE_DEG = 175.0


def cosine_weights(geometry: ConeBeamGeometry) -> np.ndarray:
    """``SDD / sqrt(SDD^2 + u^2 + v^2)`` per pixel, shape ``(rows, cols)``."""
    axis = detector_axis(geometry)
    v, u = np.meshgrid(axis, axis, indexing="ij")
    return geometry.sdd / np.sqrt(geometry.sdd**2 + u**2 + v**2)


def cosine_weight(proj: ProjectionSet) -> ProjectionSet:
    w = cosine_weights(proj.geometry)
    return proj.with_views((proj.views * w[None]).astype(np.float32))


def ramlak_kernel(n: np.ndarray, tau: float) -> np.ndarray:
    """Discrete band-limited ramp kernel sampled at integer offsets ``n``."""
    n = np.asarray(n)
    h = np.zeros(n.shape, dtype=np.float64)
    h[n == 0] = 1.0 / (4.0 * tau**2)
    odd = (n % 2) != 0
    h[odd] = -1.0 / (n[odd] * math.pi * tau) ** 2
    return h


def _padded_length(n: int) -> int:
    return int(2 ** math.ceil(math.log2(2 * n)))


def filter_response(n_det: int, tau: float, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the (windowed) kernel on the zero-padded grid."""
    if window not in WINDOWS:
        raise InvalidArgumentError(f"unknown window {window!r}; choose from {WINDOWS}")
    size = _padded_length(n_det)
    offsets = np.arange(size)
    offsets = np.where(offsets > size // 2, offsets - size, offsets)
    response = np.fft.rfft(ramlak_kernel(offsets, tau)).real
    if window == "hann":
        freq = np.fft.rfftfreq(size)  # cycles/sample, Nyquist at 0.5
        response *= 0.5 * (1.0 + np.cos(2.0 * math.pi * freq))
    return response


def filter_rows(rows: np.ndarray, tau: float, window: str = "ram-lak") -> np.ndarray:
    """Convolve the last axis of ``rows`` with the ramp kernel (no ``tau`` factor)."""
    n = rows.shape[-1]
    if n < 2:
        raise InvalidArgumentError("ramp filtering needs at least two detector columns")
    size = _padded_length(n)
    spec = np.fft.rfft(rows.astype(np.float64), n=size, axis=-1)
    spec *= filter_response(n, tau, window)
    return np.fft.irfft(spec, n=size, axis=-1)[..., :n]


def ramp_filter(proj: ProjectionSet, window: str = "ram-lak") -> ProjectionSet:
    """Row-wise ramp filtering of every view.

    Rows are zero-padded to the next power of two at least twice their length
    before the FFT convolution, so no wrap-around reaches the detector.  The
    output is the plain discrete convolution with the kernel; the sampling
    factor is applied during backprojection.
    """
    out = filter_rows(proj.views, proj.geometry.pixel_pitch, window)
    return proj.with_views(out.astype(np.float32))


def parker_weights(geometry: ConeBeamGeometry) -> np.ndarray:
    """Short-scan redundancy weights, shape ``(n_views, cols)``.

    Needs a scan range of at least 180 deg plus the full fan angle.  In this
    geometry the ray at detector offset ``u`` and view ``b`` is redundant with
    view ``b + pi - 2 atan(u / SDD)`` at offset ``-u``.
    """
    axis = detector_axis(geometry)
    gamma = -np.arctan(axis / geometry.sdd)  # sign makes the conjugate b + pi + 2*gamma
    gamma_max = float(np.max(np.abs(gamma)))
    beta = geometry.angles_rad - geometry.angles_rad[0]
    scan = float(beta[-1])
    delta = (scan - math.pi) / 2.0
    if delta < gamma_max:
        raise InsufficientCoverageError(
            f"Parker weighting needs {math.degrees(math.pi + 2 * gamma_max):.2f} deg of coverage, "
            f"views span {math.degrees(scan):.2f} deg"
        )
    b = beta[:, None]
    g = gamma[None, :]
    w = np.ones((beta.size, axis.size))
    rise = b < 2 * (delta - g)
    w = np.where(rise, np.sin(math.pi / 4 * b / (delta - g)) ** 2, w)
    fall = b > math.pi - 2 * g
    w = np.where(fall, np.sin(math.pi / 4 * (math.pi + 2 * delta - b) / (delta + g)) ** 2, w)
    return np.clip(w, 0.0, 1.0)


@numba.njit(cache=True, parallel=True)
def _backproject_kernel(filtered, thetas, sod, sdd, det0, pitch, xs, ys, zs, out):
    n_views, n_rows, n_cols = filtered.shape
    nx = xs.shape[0]
    ny = ys.shape[0]
    nz = zs.shape[0]
    for i in numba.prange(nx):
        x = xs[i]
        for view in range(n_views):
            c = math.cos(thetas[view])
            s = math.sin(thetas[view])
            for j in range(ny):
                y = ys[j]
                depth = sod - (x * c + y * s)
                mag = sdd / depth
                big_u = depth / sod
                w_dist = 1.0 / (big_u * big_u)
                fu = ((-x * s + y * c) * mag - det0) / pitch
                iu = math.floor(fu)
                au = fu - iu
                if iu < -1 or iu > n_cols - 1:
                    continue
                for k in range(nz):
                    fv = (zs[k] * mag - det0) / pitch
                    iv = math.floor(fv)
                    av = fv - iv
                    if iv < -1 or iv > n_rows - 1:
                        continue
                    val = 0.0
                    for dv in range(2):
                        rr = iv + dv
                        if rr < 0 or rr >= n_rows:
                            continue
                        cv = av if dv else 1.0 - av
                        for du in range(2):
                            cc = iu + du
                            if cc < 0 or cc >= n_cols:
                                continue
                            cu = au if du else 1.0 - au
                            val += cv * cu * filtered[view, rr, cc]
                    out[i, j, k] += w_dist * val


def fdk_reconstruct(
    proj: ProjectionSet,
    out_dims,
    out_spacing,
    window: str = "hann",
    parker: bool = False,
    out_origin=None,
) -> Volume:
    """Reconstruct a volume from cone-beam projections.

    Parameters
    ----------
    proj : ProjectionSet
        Line integrals; the views must cover at least 175 deg.
    out_dims, out_spacing : triple
        Output grid; it is centred on the rotation axis unless ``out_origin``
        is given.
    window : {"hann", "ram-lak"}
        Apodisation of the ramp filter.
    parker : bool
        Apply Parker short-scan weights instead of uniform scaling.  Uniform
        scaling multiplies each view by ``pi / coverage`` so that a half scan
        counts twice and a full scan once (with the usual 1/2).

    Returns
    -------
    Volume
        Reconstruction clamped to be non-negative.
    """
    geom = proj.geometry
    coverage = geom.coverage_deg()
    if coverage < MIN_COVERAGE_DEG:
        raise InsufficientCoverageError(f"views cover {coverage:.1f} deg, need >= {MIN_COVERAGE_DEG}")
    out_dims = tuple(int(n) for n in out_dims)
    out_spacing = tuple(float(s) for s in out_spacing)
    if out_origin is None:
        out_origin = centred_origin(out_dims, out_spacing)

    tau = geom.pixel_pitch
    tau_iso = tau / geom.magnification
    d_beta = math.radians(geom.angular_step_deg())
    weighted = proj.views.astype(np.float64) * cosine_weights(geom)[None]
    if parker:
        weighted *= parker_weights(geom)[:, None, :]
        view_scale = d_beta
    else:
        view_scale = math.pi / math.radians(coverage) * d_beta
    filtered = filter_rows(weighted, tau, window)
    # kernel rescaled from detector pitch to iso pitch, times the iso sampling step
    filtered *= view_scale * tau**2 / tau_iso

    n_cols = geom.detector_pixels
    axes = [o + s * np.arange(n) for o, s, n in zip(out_origin, out_spacing, out_dims)]
    out = np.zeros(out_dims, dtype=np.float64)
    det0 = -(n_cols - 1) / 2.0 * tau
    _backproject_kernel(
        np.ascontiguousarray(filtered),
        geom.angles_rad,
        geom.sod,
        geom.sdd,
        det0,
        tau,
        axes[0],
        axes[1],
        axes[2],
        out,
    )
    np.maximum(out, 0.0, out=out)
    return Volume(out.astype(np.float32), out_spacing, out_origin)


def synthesize_pcbct(case, geometry: ConeBeamGeometry, window: str = "hann", parker: bool = False) -> Volume:
    """Project a clean case volume and reconstruct it on the same grid."""
    vol = case.volume if hasattr(case, "volume") else case
    proj = forward_project(vol, geometry)
    return fdk_reconstruct(proj, vol.dims, vol.spacing, window=window, parker=parker, out_origin=vol.origin)
