"""Ray-driven cone-beam forward projection.

Each detector pixel receives the line integral of the volume along the ray
from the source to the pixel centre.  Integration follows Joseph's approach in
its trilinear form: the volume is sampled by trilinear interpolation at the
midpoints of equal steps of half the smallest voxel spacing, and the samples
are summed times the step length.  Interpolation treats everything outside
the grid as zero, so the integrand vanishes one voxel beyond the outer voxel
centres and rays are clipped to that box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidArgumentError, PreconditionError
from .geometry import ConeBeamGeometry, Volume, detector_axis, detector_coords, volume_fits


@dataclass
class ProjectionSet:
    """Stack of detector images, ``views[view, row, col]`` (mm x attenuation)."""

    geometry: ConeBeamGeometry
    views: np.ndarray

    def __post_init__(self):
        self.views = np.asarray(self.views)
        n = self.geometry.detector_pixels
        expected = (self.geometry.n_views, n, n)
        if self.views.shape != expected:
            raise InvalidArgumentError(f"views shape {self.views.shape} != {expected}")
        if not np.all(np.isfinite(self.views)):
            raise InvalidArgumentError("projection values must be finite")

    def with_views(self, views: np.ndarray) -> "ProjectionSet":
        return ProjectionSet(self.geometry, views)


def ray_through(geometry: ConeBeamGeometry, angle: float, row: int, col: int):
    """Source point and unit direction of the ray hitting pixel ``(row, col)``.

    ``angle`` is in degrees.
    """
    u, v = detector_coords(geometry, row, col)
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    source = np.array([geometry.sod * c, geometry.sod * s, 0.0])
    target = np.array([-geometry.oid * c - u * s, -geometry.oid * s + u * c, v])
    d = target - source
    return source, d / np.linalg.norm(d)


@numba.njit(cache=True, inline="always")
def _trilinear(vol, fx, fy, fz):
    nx, ny, nz = vol.shape
    ix = math.floor(fx)
    iy = math.floor(fy)
    iz = math.floor(fz)
    wx = fx - ix
    wy = fy - iy
    wz = fz - iz
    acc = 0.0
    for dx in range(2):
        x = ix + dx
        if x < 0 or x >= nx:
            continue
        cx = wx if dx else 1.0 - wx
        for dy in range(2):
            y = iy + dy
            if y < 0 or y >= ny:
                continue
            cy = wy if dy else 1.0 - wy
            for dz in range(2):
                z = iz + dz
                if z < 0 or z >= nz:
                    continue
                cz = wz if dz else 1.0 - wz
                acc += cx * cy * cz * vol[x, y, z]
    return acc


@numba.njit(cache=True, parallel=True)
def _project_kernel(vol, origin, spacing, sod, oid, thetas, det, step, out):
    nx, ny, nz = vol.shape
    lo0 = origin[0] - spacing[0]
    lo1 = origin[1] - spacing[1]
    lo2 = origin[2] - spacing[2]
    hi0 = origin[0] + nx * spacing[0]
    hi1 = origin[1] + ny * spacing[1]
    hi2 = origin[2] + nz * spacing[2]
    npix = det.shape[0]
    for view in numba.prange(thetas.shape[0]):
        c = math.cos(thetas[view])
        s = math.sin(thetas[view])
        sx = sod * c
        sy = sod * s
        for r in range(npix):
            v = det[r]
            for q in range(npix):
                u = det[q]
                dx = -oid * c - u * s - sx
                dy = -oid * s + u * c - sy
                dz = v
                norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                dx /= norm
                dy /= norm
                dz /= norm
                # slab clipping against the support box
                t0 = -1e300
                t1 = 1e300
                p = (sx, sy, 0.0)
                d = (dx, dy, dz)
                lo = (lo0, lo1, lo2)
                hi = (hi0, hi1, hi2)
                miss = False
                for a in range(3):
                    if abs(d[a]) < 1e-15:
                        if p[a] < lo[a] or p[a] > hi[a]:
                            miss = True
                    else:
                        ta = (lo[a] - p[a]) / d[a]
                        tb = (hi[a] - p[a]) / d[a]
                        if ta > tb:
                            ta, tb = tb, ta
                        if ta > t0:
                            t0 = ta
                        if tb < t1:
                            t1 = tb
                if miss or t1 <= t0:
                    out[view, r, q] = 0.0
                    continue
                nsteps = int(math.ceil((t1 - t0) / step))
                acc = 0.0
                for k in range(nsteps):
                    t = t0 + (k + 0.5) * step
                    fx = (sx + t * dx - origin[0]) / spacing[0]
                    fy = (sy + t * dy - origin[1]) / spacing[1]
                    fz = (t * dz - origin[2]) / spacing[2]
                    acc += _trilinear(vol, fx, fy, fz)
                out[view, r, q] = acc * step


def forward_project(volume: Volume, geometry: ConeBeamGeometry, noise_sigma: float = 0.0, seed: int = 0) -> ProjectionSet:
    """Line integrals through ``volume`` for every view of ``geometry``.

    Parameters
    ----------
    volume : Volume
        Attenuation grid; must lie inside the field of view for every angle.
    geometry : ConeBeamGeometry
        Acquisition geometry.
    noise_sigma : float, optional
        Standard deviation of additive Gaussian noise on the line integrals.
        Off by default; artifacts in the synthesis come from reconstruction.
    seed : int, optional
        Seed for the additive noise.

    Returns
    -------
    ProjectionSet
        ``views`` as float32 with shape ``(n_views, npix, npix)``.
    """
    bad = volume_fits(volume, geometry)
    if bad is not None:
        raise PreconditionError(
            f"volume exceeds the field of view at angle {geometry.angles[bad]} deg (view {bad})"
        )
    vol = np.ascontiguousarray(volume.data, dtype=np.float64)
    npix = geometry.detector_pixels
    out = np.empty((geometry.n_views, npix, npix), dtype=np.float64)
    step = min(volume.spacing) / 2.0
    _project_kernel(
        vol,
        np.asarray(volume.origin, dtype=np.float64),
        np.asarray(volume.spacing, dtype=np.float64),
        geometry.sod,
        geometry.oid,
        geometry.angles_rad,
        detector_axis(geometry),
        step,
        out,
    )
    if noise_sigma > 0:
        out += np.random.default_rng(seed).normal(0.0, noise_sigma, out.shape)
    return ProjectionSet(geometry, out.astype(np.float32))
