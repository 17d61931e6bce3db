import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbctcad import metrics
from cbctcad.errors import InsufficientCoverageError, InvalidArgumentError
from cbctcad.fdk import (
    cosine_weight,
    cosine_weights,
    fdk_reconstruct,
    filter_rows,
    parker_weights,
    ramlak_kernel,
    ramp_filter,
    synthesize_pcbct,
)
from cbctcad.geometry import ConeBeamGeometry, Volume, half_scan_angles
from cbctcad.phantom import generate_case, sphere_volume
from cbctcad.projector import ProjectionSet, forward_project


def test_cosine_weight_centre_is_one():
    w = cosine_weights(ConeBeamGeometry(detector_pixels=9))
    assert w[4, 4] == 1.0


def test_cosine_weight_ordering():
    w = cosine_weights(ConeBeamGeometry(detector_pixels=9))
    assert w[0, 0] < w[0, 4] < 1.0


def test_cosine_weight_diagonal_value():
    g = ConeBeamGeometry(detector_pixels=3, detector_size=3 * 1400 / math.sqrt(2))
    # pixel (2, 2) sits at u = v = SDD / sqrt(2)
    assert cosine_weights(g)[2, 2] == pytest.approx(1 / math.sqrt(2))


def test_cosine_weight_applies_per_view():
    g = ConeBeamGeometry(detector_pixels=5, angles=(0.0, 10.0))
    p = cosine_weight(ProjectionSet(g, np.ones((2, 5, 5))))
    assert np.allclose(p.views[1], cosine_weights(g))


def test_ramlak_table():
    n = np.arange(-5, 6)
    h = ramlak_kernel(n, 2.0)
    assert h[5] == pytest.approx(1 / 16)
    assert h[6] == pytest.approx(-1 / (math.pi * 2) ** 2)
    assert h[8] == pytest.approx(-1 / (3 * math.pi * 2) ** 2)
    assert h[7] == 0 and h[3] == 0
    assert np.allclose(h, h[::-1])


def test_impulse_response_is_kernel():
    row = np.zeros(64)
    row[32] = 1.0
    out = filter_rows(row[None], 1.0)[0]
    assert np.allclose(out, ramlak_kernel(np.arange(64) - 32, 1.0), atol=1e-6)


def test_constant_row_filters_to_zero_in_interior():
    out = filter_rows(np.ones((1, 2048)), 1.0)[0]
    assert np.abs(out[1016:1032]).max() < 1e-3


def test_hann_damps_nyquist():
    alt = np.cos(np.pi * np.arange(256))[None]
    ram = filter_rows(alt, 1.0, "ram-lak")[0, 96:160]
    hann = filter_rows(alt, 1.0, "hann")[0, 96:160]
    assert np.abs(hann).max() < 0.01 * np.abs(ram).max()


def test_unknown_window():
    with pytest.raises(InvalidArgumentError):
        filter_rows(np.ones((1, 8)), 1.0, "shepp")


@given(st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_filter_linearity(a, seed):
    r = np.random.default_rng(seed).random((2, 3, 20))
    assert np.allclose(filter_rows(a * r, 1.5), a * filter_rows(r, 1.5), atol=1e-9)


def test_ramp_filter_keeps_geometry():
    g = ConeBeamGeometry(detector_pixels=8, angles=(0.0,))
    p = ramp_filter(ProjectionSet(g, np.ones((1, 8, 8))))
    assert p.geometry == g and p.views.shape == (1, 8, 8)


def test_zero_projections_reconstruct_to_zero():
    g = ConeBeamGeometry(detector_pixels=32)
    vol = fdk_reconstruct(ProjectionSet(g, np.zeros((90, 32, 32))), (8, 8, 8), (4.0, 4.0, 4.0))
    assert not vol.data.any()


def test_insufficient_coverage():
    g = ConeBeamGeometry(detector_pixels=16, angles=half_scan_angles(2, 170))
    with pytest.raises(InsufficientCoverageError):
        fdk_reconstruct(ProjectionSet(g, np.zeros((85, 16, 16))), (8, 8, 8), (4.0, 4.0, 4.0))


def test_parker_needs_fan_margin():
    with pytest.raises(InsufficientCoverageError):
        parker_weights(ConeBeamGeometry(detector_pixels=16))


def test_parker_conjugate_rays_sum_to_one():
    g = ConeBeamGeometry(detector_pixels=33, angles=half_scan_angles(1, 240))
    w = parker_weights(g)
    centre = 16  # gamma = 0, conjugate view is 180 deg later
    assert np.allclose(w[:60, centre] + w[180:240, centre], 1.0, atol=1e-9)
    assert w.min() >= 0 and w.max() <= 1


@pytest.fixture(scope="module")
def sphere_case():
    vol = sphere_volume((32, 32, 32), (4.0, 4.0, 4.0), 40.0, 0.8)
    return vol


def test_full_scan_sphere_interior_mean(sphere_case):
    g = ConeBeamGeometry(detector_pixels=64, angles=half_scan_angles(1, 360))
    rec = fdk_reconstruct(forward_project(sphere_case, g), sphere_case.dims, sphere_case.spacing, window="ram-lak")
    x = sphere_case.axis_coords(0)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    inner = np.sqrt(X**2 + Y**2 + Z**2) < 40.0 - 3 * 4.0
    assert rec.data[inner].mean() == pytest.approx(0.8, rel=0.05)


def test_half_scan_scaling_and_parker_agree_on_sphere(sphere_case):
    g = ConeBeamGeometry(detector_pixels=64, angles=half_scan_angles(1, 210))
    p = forward_project(sphere_case, g)
    uni = fdk_reconstruct(p, sphere_case.dims, sphere_case.spacing)
    par = fdk_reconstruct(p, sphere_case.dims, sphere_case.spacing, parker=True)
    c = slice(12, 20)
    assert uni.data[c, c, c].mean() == pytest.approx(0.8, rel=0.08)
    assert par.data[c, c, c].mean() == pytest.approx(0.8, rel=0.05)


def test_midplane_exactness_for_smooth_object():
    # band-limited blob centred on the source plane; grid has no voxel at
    # z = 0, so the two slices straddling it are averaged
    n, s = 32, 4.0
    x = (np.arange(n) - (n - 1) / 2) * s
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    data = 0.6 * np.exp(-((X - 10) ** 2 + (Y + 6) ** 2) / (2 * 14.0**2) - Z**2 / (2 * 6.0**2))
    vol = Volume(data, (s, s, s))
    g = ConeBeamGeometry(detector_pixels=128, angles=half_scan_angles(1, 360))
    rec = fdk_reconstruct(forward_project(vol, g), vol.dims, vol.spacing, window="ram-lak")
    err = rec.data[:, :, 15:17].mean(axis=2) - data[:, :, 15:17].mean(axis=2)
    assert np.sqrt(np.mean(err**2)) < 0.02 * 0.6


def test_linearity_up_to_clamp(sphere_case):
    g = ConeBeamGeometry(detector_pixels=48, angles=half_scan_angles(2, 180))
    p = forward_project(sphere_case, g)
    a = fdk_reconstruct(p, (16, 16, 16), (8.0, 8.0, 8.0)).data
    b = fdk_reconstruct(p.with_views(2.5 * p.views), (16, 16, 16), (8.0, 8.0, 8.0)).data
    assert np.allclose(b, 2.5 * a, rtol=1e-4, atol=1e-5)


def test_synthesis_is_deterministic_and_on_case_grid():
    case = generate_case(5, "MFB", "CRS", (32, 32, 32))
    g = ConeBeamGeometry(detector_pixels=64)
    a, b = synthesize_pcbct(case, g), synthesize_pcbct(case, g)
    assert np.array_equal(a.data, b.data)
    assert a.dims == case.volume.dims and a.origin == case.volume.origin
    assert (a.data >= 0).all()


@pytest.mark.slow
def test_views_monotonicity_full_scan():
    case = generate_case(11, "MFB", "CRS")
    vol = case.volume
    rmse = []
    for n_views in (30, 90, 180, 360):
        g = ConeBeamGeometry(detector_pixels=128, angles=half_scan_angles(360 // n_views, 360))
        rec = fdk_reconstruct(forward_project(vol, g), vol.dims, vol.spacing, out_origin=vol.origin)
        rmse.append(float(np.sqrt(np.mean((rec.data - vol.data) ** 2))))
    for prev, nxt in zip(rmse, rmse[1:]):
        assert nxt <= prev * 1.01


@pytest.mark.slow
def test_synthesis_psnr_band_and_rank_order():
    from cbctcad.phantom import DatasetSpec, generate_dataset

    g = ConeBeamGeometry(detector_pixels=128)
    cases = generate_dataset(DatasetSpec((17, 17, 16)), seed=21)
    ok = 0
    psnrs = []
    for c in cases:
        rec = synthesize_pcbct(c, g).data
        psnrs.append(metrics.psnr(c.volume.data, rec))
        means = {}
        for side, label in (("left", c.left_label), ("right", c.right_label)):
            mask = c.core_mask(side) if label.name == "MFB" else c.cavity_mask(side)
            means.setdefault(label.name, []).append(rec[mask].mean())
        order = [np.mean(means[k]) for k in ("HC", "CRS", "MFB") if k in means]
        ok += all(a < b for a, b in zip(order, order[1:]))
    assert ok / len(cases) >= 0.95
    assert 15.0 < min(psnrs) and max(psnrs) < 30.0
