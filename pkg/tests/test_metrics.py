import itertools
import math
from fractions import Fraction as Fr

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from cbctcad import metrics
from cbctcad.errors import InvalidArgumentError, UndefinedAUCError


def pairwise_auc(truth, scores):
    """Exhaustive Mann-Whitney oracle: wins plus half ties over all pairs."""
    pos = [s for t, s in zip(truth, scores) if t]
    neg = [s for t, s in zip(truth, scores) if not t]
    wins = sum(Fr(1) if p > n else Fr(1, 2) if p == n else Fr(0) for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def multiclass_oracle(truth, probs):
    C = probs.shape[1]
    onehot = [[int(t == c) for c in range(C)] for t in truth]
    macro = sum(pairwise_auc([o[c] for o in onehot], probs[:, c]) for c in range(C)) / C
    micro = pairwise_auc([v for o in onehot for v in o], probs.ravel())
    return micro, macro


# (cm, accuracy, precision, sensitivity, f1) in exact arithmetic
FIXED = [
    ([[5, 0, 0], [0, 0, 5], [0, 0, 5]], Fr(2, 3), [Fr(1), Fr(0), Fr(1, 2)], [Fr(1), Fr(0), Fr(1)], [Fr(1), Fr(0), Fr(2, 3)]),
    ([[8, 2, 0], [1, 9, 0], [0, 0, 10]], Fr(9, 10), [Fr(8, 9), Fr(9, 11), Fr(1)], [Fr(4, 5), Fr(9, 10), Fr(1)], [Fr(16, 19), Fr(6, 7), Fr(1)]),
    ([[10, 0, 0], [0, 10, 0], [0, 0, 10]], Fr(1), [Fr(1)] * 3, [Fr(1)] * 3, [Fr(1)] * 3),
    ([[3, 1, 1], [2, 4, 0], [0, 1, 6]], Fr(13, 18), [Fr(3, 5), Fr(2, 3), Fr(6, 7)], [Fr(3, 5), Fr(2, 3), Fr(6, 7)], [Fr(3, 5), Fr(2, 3), Fr(6, 7)]),
    ([[0, 0, 0], [0, 4, 1], [0, 2, 3]], Fr(7, 10), [Fr(0), Fr(2, 3), Fr(3, 4)], [Fr(0), Fr(4, 5), Fr(3, 5)], [Fr(0), Fr(8, 11), Fr(2, 3)]),
    ([[1, 2, 3], [4, 5, 6], [7, 8, 9]], Fr(1, 3), [Fr(1, 12), Fr(1, 3), Fr(1, 2)], [Fr(1, 6), Fr(1, 3), Fr(3, 8)], [Fr(1, 9), Fr(1, 3), Fr(3, 7)]),
    ([[6, 0, 0], [6, 0, 0], [8, 0, 0]], Fr(3, 10), [Fr(3, 10), Fr(0), Fr(0)], [Fr(1), Fr(0), Fr(0)], [Fr(6, 13), Fr(0), Fr(0)]),
    ([[2, 0, 1], [0, 0, 0], [1, 0, 2]], Fr(2, 3), [Fr(2, 3), Fr(0), Fr(2, 3)], [Fr(2, 3), Fr(0), Fr(2, 3)], [Fr(2, 3), Fr(0), Fr(2, 3)]),
    ([[12, 3, 5], [2, 14, 2], [4, 1, 17]], Fr(43, 60), [Fr(2, 3), Fr(7, 9), Fr(17, 24)], [Fr(3, 5), Fr(7, 9), Fr(17, 22)], [Fr(12, 19), Fr(7, 9), Fr(17, 23)]),
    ([[0, 1, 0], [0, 0, 1], [1, 0, 0]], Fr(0), [Fr(0)] * 3, [Fr(0)] * 3, [Fr(0)] * 3),
]


@pytest.mark.parametrize("cm, acc, prec, sens, f1", FIXED)
def test_fixed_confusion_matrices(cm, acc, prec, sens, f1):
    assert metrics.accuracy(cm) == pytest.approx(float(acc), abs=1e-12)
    m = metrics.per_class_prf(cm)
    assert np.allclose(m.precision, [float(x) for x in prec], atol=1e-12)
    assert np.allclose(m.sensitivity, [float(x) for x in sens], atol=1e-12)
    assert np.allclose(m.f1, [float(x) for x in f1], atol=1e-12)
    assert m.macro_f1 == pytest.approx(float(sum(f1) / 3), abs=1e-12)
    assert m.macro_precision == pytest.approx(float(sum(prec) / 3), abs=1e-12)


def test_precision_uses_false_positives():
    # columns are predictions: class 0 predicted 9 times, 8 of them right
    assert metrics.per_class_prf([[8, 2, 0], [1, 9, 0], [0, 0, 10]]).precision[0] == pytest.approx(8 / 9)


def test_empty_confusion_matrix():
    with pytest.raises(InvalidArgumentError):
        metrics.accuracy(np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        metrics.per_class_prf(np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        metrics.accuracy([[1, -1, 0], [0, 1, 0], [0, 0, 1]])


def test_confusion_matrix_counts():
    cm = metrics.confusion_matrix([0, 1, 2, 2, 1], [0, 2, 2, 1, 1])
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 1, 1]]


@given(st.lists(st.integers(0, 20), min_size=9, max_size=9), st.permutations([0, 1, 2]))
def test_permutation_invariance(counts, perm):
    cm = np.array(counts).reshape(3, 3)
    if cm.sum() == 0:
        return
    p = np.array(perm)
    cm2 = cm[np.ix_(p, p)]
    assert metrics.accuracy(cm2) == pytest.approx(metrics.accuracy(cm))
    a, b = metrics.per_class_prf(cm), metrics.per_class_prf(cm2)
    assert np.allclose(b.f1, a.f1[p]) and np.allclose(b.precision, a.precision[p])


def test_auc_examples():
    assert metrics.roc_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.3]) == 0.75
    assert metrics.roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert metrics.roc_auc([0, 1, 0, 1], [0.5] * 4) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedAUCError):
        metrics.roc_auc([1, 1], [0.1, 0.2])


def test_roc_auc_matches_oracle_on_50_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 101))
        truth = rng.integers(0, 2, n)
        truth[0], truth[1] = 0, 1
        scores = rng.integers(0, 12, n) / 11.0  # plenty of ties
        assert metrics.roc_auc(truth, scores) == pytest.approx(float(pairwise_auc(truth, scores)), abs=1e-12)


def test_multiclass_auc_matches_oracle_on_50_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(3, 34))
        truth = rng.integers(0, 3, n)
        truth[:3] = [0, 1, 2]
        raw = rng.integers(1, 6, (n, 3)).astype(float)
        probs = raw / raw.sum(axis=1, keepdims=True)
        micro, macro = metrics.multiclass_auc(truth, probs)
        o_micro, o_macro = multiclass_oracle(truth, probs)
        assert micro == pytest.approx(float(o_micro), abs=1e-12)
        assert macro == pytest.approx(float(o_macro), abs=1e-12)


def test_multiclass_nine_sample_fixture():
    truth = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    probs = np.array(
        [
            [0.7, 0.2, 0.1],
            [0.5, 0.3, 0.2],
            [0.3, 0.4, 0.3],
            [0.2, 0.6, 0.2],
            [0.4, 0.4, 0.2],
            [0.1, 0.5, 0.4],
            [0.1, 0.2, 0.7],
            [0.2, 0.3, 0.5],
            [0.3, 0.3, 0.4],
        ]
    )
    micro, macro = metrics.multiclass_auc(truth, probs)
    o_micro, o_macro = multiclass_oracle(truth, probs)
    assert (micro, macro) == pytest.approx((float(o_micro), float(o_macro)), abs=1e-12)


def test_multiclass_trivial_cases():
    truth = [0, 1, 2, 0]
    assert metrics.multiclass_auc(truth, np.eye(3)[truth]) == (1.0, 1.0)
    assert metrics.multiclass_auc(truth, np.full((4, 3), 1 / 3)) == (0.5, 0.5)
    with pytest.raises(UndefinedAUCError):
        metrics.multiclass_auc([0, 1, 1], np.full((3, 3), 1 / 3))


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5)), min_size=2, max_size=100))
def test_roc_auc_property(pairs):
    truth = [t for t, _ in pairs]
    if all(truth) or not any(truth):
        return
    scores = [s / 5 for _, s in pairs]
    assert metrics.roc_auc(truth, scores) == pytest.approx(float(pairwise_auc(truth, scores)), abs=1e-12)


def test_psnr_examples():
    a = np.zeros((8, 8))
    assert metrics.psnr(a, a) == math.inf
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert metrics.psnr(a, a + 1.0) == pytest.approx(0.0)
    with pytest.raises(InvalidArgumentError):
        metrics.psnr(a, np.zeros((8, 7)))


def test_psnr_decreases_with_noise(rng):
    img = rng.random((32, 32))
    noise = np.random.default_rng(7).normal(size=img.shape)
    vals = [metrics.psnr(img, img + s * noise) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_examples(rng):
    x = rng.random((32, 32))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert metrics.ssim(x, 1.0 - x) < 1.0
    c = np.full((16, 16), 0.4)
    assert metrics.ssim(c, c) == pytest.approx(1.0, abs=1e-9)


def test_ssim_matches_scikit_image(rng):
    for _ in range(5):
        x = rng.random((40, 48))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert metrics.ssim(x, y) == pytest.approx(ref, abs=1e-9)


def test_ssim_symmetric(rng):
    x, y = rng.random((20, 20)), rng.random((20, 20))
    assert metrics.ssim(x, y) == pytest.approx(metrics.ssim(y, x), abs=1e-12)


def test_ssim_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        metrics.ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(InvalidArgumentError):
        metrics.ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_multiscale_ssim(rng):
    x = rng.random((64, 64))
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    assert metrics.ssim(x, x, scales=3) == pytest.approx(1.0)
    v = metrics.ssim(x, y, scales=3)
    assert 0 < v < 1
    with pytest.raises(InvalidArgumentError):
        metrics.ssim(np.zeros((30, 30)), np.zeros((30, 30)), scales=3)


def test_mean_sd():
    assert metrics.mean_sd([1.0]) == (1.0, 0.0)
    assert metrics.mean_sd([1.0, 3.0]) == (2.0, 1.0)
    assert metrics.mean_sd([math.inf, math.inf]) == (math.inf, 0.0)
    with pytest.raises(InvalidArgumentError):
        metrics.mean_sd([])
