import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbctcad.errors import InvalidArgumentError
from cbctcad.geometry import (
    ConeBeamGeometry,
    Volume,
    centred_origin,
    detector_axis,
    detector_coords,
    half_scan_angles,
    volume_fits,
)


def test_half_scan_reference_protocol():
    a = half_scan_angles(2, 180)
    assert len(a) == 90
    assert a[0] == 0 and a[-1] == 178
    assert np.allclose(np.diff(a), 2)


def test_half_scan_two_views():
    assert half_scan_angles(90, 180) == [0, 90]


@pytest.mark.parametrize("step, arc", [(2, 181), (0, 180), (-2, 180), (2, 0), (7, 180)])
def test_half_scan_rejects(step, arc):
    with pytest.raises(InvalidArgumentError):
        half_scan_angles(step, arc)


@given(st.integers(1, 60), st.integers(1, 12))
def test_half_scan_length_property(step, mult):
    assert len(half_scan_angles(step, step * mult)) == mult


def test_detector_coords_two_pixel_corners():
    g = ConeBeamGeometry(detector_pixels=2, detector_size=512)
    assert detector_coords(g, 0, 0) == (-128.0, -128.0)
    assert detector_coords(g, 1, 1) == (128.0, 128.0)


def test_detector_coords_256():
    g = ConeBeamGeometry(detector_pixels=256, detector_size=512)
    assert detector_coords(g, 128, 128) == pytest.approx((1.0, 1.0))


def test_detector_coords_u_follows_column():
    g = ConeBeamGeometry(detector_pixels=4, detector_size=8)
    u, v = detector_coords(g, 0, 3)
    assert (u, v) == (3.0, -3.0)


@pytest.mark.parametrize("rc", [(-1, 0), (0, 256), (256, 0)])
def test_detector_coords_out_of_range(rc):
    with pytest.raises(InvalidArgumentError):
        detector_coords(ConeBeamGeometry(), *rc)


@given(st.integers(2, 300), st.data())
def test_detector_coords_antisymmetric(n, data):
    g = ConeBeamGeometry(detector_pixels=n)
    r = data.draw(st.integers(0, n - 1))
    c = data.draw(st.integers(0, n - 1))
    u1, v1 = detector_coords(g, r, c)
    u2, v2 = detector_coords(g, n - 1 - r, n - 1 - c)
    assert u1 + u2 == pytest.approx(0, abs=1e-9)
    assert v1 + v2 == pytest.approx(0, abs=1e-9)
    # affine in the index
    if c + 1 < n:
        assert detector_coords(g, r, c + 1)[0] - u1 == pytest.approx(g.pixel_pitch)


def test_detector_axis_matches_coords():
    g = ConeBeamGeometry(detector_pixels=7)
    ax = detector_axis(g)
    assert np.allclose(ax, [detector_coords(g, 0, c)[0] for c in range(7)])


def test_geometry_defaults_and_magnification():
    g = ConeBeamGeometry()
    assert g.sod == 1200 and g.oid == 200 and g.sdd == 1400
    assert g.detector_pixels == 256 and g.n_views == 90
    assert g.magnification == pytest.approx(1400 / 1200)
    assert g.pixel_pitch == 2.0
    assert g.coverage_deg() == pytest.approx(180.0)


@pytest.mark.parametrize(
    "kw",
    [
        {"source_object_distance": 0},
        {"object_image_distance": -1},
        {"detector_size": 0},
        {"detector_pixels": 1},
        {"angles": ()},
        {"angles": (0, 5, 5)},
        {"angles": (10, 5)},
        {"angles": (0, 360)},
    ],
)
def test_geometry_invariants(kw):
    with pytest.raises(InvalidArgumentError):
        ConeBeamGeometry(**kw)


def test_geometry_json_round_trip(tmp_path):
    g = ConeBeamGeometry(detector_pixels=64, angles=half_scan_angles(4, 360))
    p = tmp_path / "g.json"
    g.save(p)
    assert set(json.loads(p.read_text())) == {"sod_mm", "oid_mm", "detector_mm", "detector_px", "angles_deg"}
    assert ConeBeamGeometry.load(p) == g


def test_volume_validation():
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_volume_default_origin_is_centred():
    v = Volume(np.zeros((4, 5, 6)), (1.0, 2.0, 3.0))
    assert v.origin == centred_origin((4, 5, 6), (1.0, 2.0, 3.0))
    for ax in range(3):
        assert v.axis_coords(ax).mean() == pytest.approx(0.0)


def test_volume_fits():
    g = ConeBeamGeometry()
    assert volume_fits(Volume(np.zeros((64, 64, 64)), (3.0, 3.0, 3.0)), g) is None
    assert volume_fits(Volume(np.zeros((64, 64, 64)), (10.0, 10.0, 10.0)), g) == 0
