import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbctcad.errors import InvalidArgumentError
from cbctcad.phantom import (
    EXTERNAL_RATIOS,
    INTERNAL_RATIOS,
    DatasetSpec,
    DiagnosisLabel,
    dataset_labels,
    draw_case_params,
    generate_case,
    generate_dataset,
    render_case,
    sphere_volume,
)

labels = st.sampled_from(list(DiagnosisLabel))


def test_label_order():
    assert [int(l) for l in DiagnosisLabel] == [0, 1, 2]
    assert [l.name for l in DiagnosisLabel] == ["HC", "CRS", "MFB"]


def test_healthy_cavities_are_air():
    c = generate_case(1, "HC", "HC", (64, 64, 64))
    for side in ("left", "right"):
        assert c.volume.data[c.cavity_mask(side)].mean() < 0.1


def test_mfb_and_crs_contents():
    c = generate_case(1, "MFB", "CRS", (64, 64, 64))
    assert c.volume.data[c.cavity_mask("left")].max() > 0.7
    assert c.volume.data[c.cavity_mask("right")].max() < 0.5


def test_same_seed_identical():
    a = generate_case(9, "CRS", "MFB")
    b = generate_case(9, "CRS", "MFB")
    assert np.array_equal(a.volume.data, b.volume.data)
    assert a.key_slice_range == b.key_slice_range


def test_different_seed_differs():
    assert not np.array_equal(generate_case(1, "HC", "HC").volume.data, generate_case(2, "HC", "HC").volume.data)


@pytest.mark.parametrize("dims", [(31, 64, 64), (64, 16, 64), (64, 64)])
def test_small_dims_rejected(dims):
    with pytest.raises(InvalidArgumentError):
        generate_case(0, "HC", "HC", dims)


def test_values_in_unit_range_and_tissue_levels():
    c = generate_case(4, "MFB", "HC")
    d = c.volume.data
    assert d.min() >= 0 and d.max() <= 1
    assert d.dtype == np.float32
    # brain-region tissue near 0.3, skull near 0.9
    assert abs(d[32, 40, 32] - 0.3) < 0.05
    assert d.max() == pytest.approx(0.9, abs=0.01)


@settings(max_examples=15)
@given(st.integers(0, 10**6), labels, labels)
def test_case_invariants(seed, left, right):
    c = generate_case(seed, left, right, (32, 32, 32))
    lo, hi = c.key_slice_range
    assert 0 <= lo <= hi < 32
    assert not (c.cavity_mask("left") & c.cavity_mask("right")).any()
    rows = (c.cavity_mask("left") | c.cavity_mask("right")).any(axis=(0, 2))
    assert rows[lo] and rows[hi] and rows.sum() == hi - lo + 1


@settings(max_examples=15)
@given(st.integers(0, 10**6), labels, labels)
def test_mirror_commutes_with_label_swap(seed, left, right):
    p = draw_case_params(seed, left, right, (32, 32, 32))
    assert np.array_equal(render_case(p.mirrored()), render_case(p)[::-1])


def test_left_cavity_is_low_x():
    c = generate_case(3, "MFB", "HC")
    xs = np.flatnonzero(c.cavity_mask("left").any(axis=(1, 2)))
    assert xs.max() < 32


def test_mfb_core_fraction():
    fr = []
    for seed in range(12):
        c = generate_case(seed, "MFB", "MFB")
        for side in ("left", "right"):
            fr.append(c.core_mask(side).sum() / c.cavity_mask(side).sum())
    assert 0.10 <= min(fr) and max(fr) <= 0.30


def test_crs_lining_leaves_some_lumens_and_some_full():
    lumen = []
    for seed in range(30):
        p = draw_case_params(seed, "CRS", "CRS")
        lumen += [p.left.lumen is not None, p.right.lumen is not None]
    assert 0 < sum(lumen) < len(lumen)


def test_separability_oracle_on_clean_phantoms():
    cases = generate_dataset(DatasetSpec.from_ratios(40, INTERNAL_RATIOS), seed=3)
    feats, truth = [], []
    for c in cases:
        for side, lab in (("left", c.left_label), ("right", c.right_label)):
            vals = c.volume.data[c.cavity_mask(side)]
            feats.append((vals.mean(), vals.max()))
            truth.append(int(lab))
    feats, truth = np.array(feats), np.array(truth)
    # brute force over all midpoints: max decides MFB, mean decides CRS vs HC
    cands = lambda v: (np.sort(v)[1:] + np.sort(v)[:-1]) / 2
    best = 0.0
    for t_max, t_mean in itertools.product(cands(feats[:, 1]), cands(feats[:, 0])):
        pred = np.where(feats[:, 1] > t_max, 2, np.where(feats[:, 0] > t_mean, 1, 0))
        best = max(best, np.mean(pred == truth))
        if best == 1.0:
            break
    assert best == 1.0


def test_dataset_external_ratios():
    spec = DatasetSpec.from_ratios(64, EXTERNAL_RATIOS)
    assert spec.counts == (20, 18, 26)
    pairs = dataset_labels(spec, seed=0)
    for side in range(2):
        hist = np.bincount([int(p[side]) for p in pairs], minlength=3)
        assert tuple(hist) == (20, 18, 26)


def test_desk_defaults():
    assert DatasetSpec.from_ratios(100, INTERNAL_RATIOS).counts == (25, 25, 50)
    assert DatasetSpec.from_ratios(20, EXTERNAL_RATIOS).counts == (6, 6, 8)


@given(st.integers(1, 500))
def test_from_ratios_total(total):
    assert DatasetSpec.from_ratios(total, INTERNAL_RATIOS).total == total


def test_empty_dataset_rejected():
    with pytest.raises(InvalidArgumentError):
        DatasetSpec.from_ratios(0)
    with pytest.raises(InvalidArgumentError):
        DatasetSpec((0, 0, 0))


def test_dataset_deterministic():
    spec = DatasetSpec((1, 1, 1), dims=(32, 32, 32), prefix="t")
    a, b = generate_dataset(spec, 5), generate_dataset(spec, 5)
    assert [c.case_id for c in a] == [c.case_id for c in b] == ["t-0000", "t-0001", "t-0002"]
    for x, y in zip(a, b):
        assert np.array_equal(x.volume.data, y.volume.data)


def test_metadata_fields():
    m = generate_case(1, "MFB", "HC", case_id="x").metadata()
    assert m["left_label"] == "MFB" and m["right_label"] == "HC" and m["case_id"] == "x"
    assert len(m["key_slice_range"]) == 2 and m["seed"] == 1


def test_sphere_volume():
    v = sphere_volume((32, 32, 32), (2.0, 2.0, 2.0), 20.0, 0.5)
    assert v.data[16, 16, 16] == pytest.approx(0.5)
    assert v.data[0, 0, 0] == 0
    expected = 4 / 3 * np.pi * 20.0**3 * 0.5
    assert v.data.sum() * 8.0 == pytest.approx(expected, rel=0.01)
