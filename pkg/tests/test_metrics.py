import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqseg.autodiff import Tensor, gradcheck
from vqseg.errors import DataError, DimensionError
from vqseg.metrics import (
    boundary,
    dice_ce_loss,
    dice_score,
    evaluate_sample,
    reports_to_csv,
    surface_distances,
)


def saturated_logits(target, num_classes, scale=30.0):
    onehot = (target[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float32)
    return Tensor(scale * (2 * onehot - 1))


# ---------------------------------------------------------------- losses
def test_loss_perfect_prediction():
    target = np.array([[[0, 1], [2, 1]]])
    dl, ce = dice_ce_loss(saturated_logits(target, 3), target)
    assert float(dl.data) <= 1e-3 and float(ce.data) <= 1e-3


def test_loss_uniform_logits_ce_is_ln2():
    target = np.array([[[0, 1], [1, 0]]])
    _, ce = dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), target)
    assert float(ce.data) == pytest.approx(math.log(2), abs=1e-6)


def test_loss_hand_example():
    # pixel 0 favours class 0, pixel 1 favours class 1
    logits = Tensor(np.array([[[[10.0, -10.0]], [[-10.0, 10.0]]]]))
    good, _ = dice_ce_loss(logits, np.array([[[0, 1]]]))
    bad, _ = dice_ce_loss(logits, np.array([[[1, 0]]]))
    p = 1.0 / (1.0 + math.exp(-20.0))
    eps = 1e-5
    per_class_good = (2 * p + eps) / (1 + 1 + eps)
    per_class_bad = (2 * (1 - p) + eps) / (1 + 1 + eps)
    assert float(good.data) == pytest.approx(1 - per_class_good, abs=1e-6)
    assert float(bad.data) == pytest.approx(1 - per_class_bad, abs=1e-6)
    assert float(good.data) < 1e-6 and float(bad.data) > 0.999


def test_loss_label_out_of_range():
    with pytest.raises(DataError):
        dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 2], [0, 0]]]))
    with pytest.raises(DimensionError):
        dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 3), dtype=int))


def test_loss_gradients():
    rng = np.random.default_rng(0)
    target = rng.integers(0, 3, size=(2, 3, 3))
    for which in (0, 1):
        res = gradcheck(lambda z: dice_ce_loss(z, target)[which], [rng.normal(size=(2, 3, 3, 3))])
        assert res["ok"], res


def test_soft_and_hard_dice_converge_together():
    target = np.array([[[0, 1, 2], [1, 1, 2], [0, 0, 2]]])
    prev = None
    for scale in (1.0, 5.0, 25.0):
        logits = saturated_logits(target, 3, scale)
        dl, _ = dice_ce_loss(logits, target)
        if prev is not None:
            assert float(dl.data) < prev
        prev = float(dl.data)
        hard = dice_score(logits.data.argmax(1), target, 3)
        np.testing.assert_array_equal(hard, 1.0)
    assert prev < 1e-6


# ---------------------------------------------------------------- hard dice
def test_dice_identity_and_disjoint():
    t = np.array([[0, 1], [1, 0]])
    np.testing.assert_array_equal(dice_score(t, t, 2), [1.0, 1.0])
    p = np.array([[1, 0], [0, 1]])
    assert dice_score(p, t, 2)[1] == 0.0


def test_dice_half_cover():
    target = np.zeros((4, 4), dtype=int)
    target[0, :] = 1  # 4 pixels
    pred = np.zeros((4, 4), dtype=int)
    pred[0, :2] = 1  # half the target
    pred[3, :2] = 1  # two extra
    assert dice_score(pred, target, 2)[1] == pytest.approx(0.5)


def test_dice_absent_class_scores_one():
    t = np.zeros((3, 3), dtype=int)
    assert dice_score(t, t, 3)[2] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, size=(2, 6, 6))
    np.testing.assert_array_equal(dice_score(a, b, 3), dice_score(b, a, 3))


# ---------------------------------------------------------------- surface distances
def brute_surface(pred, target):
    bp = np.argwhere(boundary(pred))
    bt = np.argwhere(boundary(target))
    d = np.sqrt(((bp[:, None, :] - bt[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return np.sort(pooled)


def sorted_percentile(values, q):
    """Linear interpolation between order statistics of a sorted array."""
    v = np.sort(values)
    pos = (len(v) - 1) * q / 100.0
    lo, hi = int(np.floor(pos)), int(np.ceil(pos))
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def test_surface_identical_masks():
    m = np.zeros((8, 8), dtype=int)
    m[2:6, 2:6] = 1
    assert surface_distances(m, m, 1) == (0.0, 0.0)


def test_surface_single_pixels_three_apart():
    a = np.zeros((5, 7), dtype=int)
    b = np.zeros((5, 7), dtype=int)
    a[2, 1] = 1
    b[2, 4] = 1
    hd95, asd = surface_distances(a, b, 1)
    assert hd95 == pytest.approx(3.0) and asd == pytest.approx(3.0)


def test_surface_shifted_square_matches_brute_force():
    a = np.zeros((10, 10), dtype=int)
    b = np.zeros((10, 10), dtype=int)
    a[2:7, 2:7] = 1
    b[2:7, 3:8] = 1
    pooled = brute_surface(a == 1, b == 1)
    hd95, asd = surface_distances(a, b, 1)
    assert hd95 == pytest.approx(sorted_percentile(pooled, 95), abs=1e-6)
    assert asd == pytest.approx(pooled.mean(), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_surface_random_blobs_against_oracle(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((9, 9)) < 0.4).astype(int)
    b = (rng.random((9, 9)) < 0.4).astype(int)
    a[4, 4] = b[4, 4] = 1
    pooled = brute_surface(a == 1, b == 1)
    hd95, asd = surface_distances(a, b, 1)
    hd95_rev, asd_rev = surface_distances(b, a, 1)
    assert hd95 == pytest.approx(sorted_percentile(pooled, 95), abs=1e-6)
    assert asd == pytest.approx(pooled.mean(), abs=1e-6)
    assert (hd95, asd) == pytest.approx((hd95_rev, asd_rev))
    assert hd95 <= pooled.max() + 1e-12 and asd <= pooled.max() + 1e-12


def test_surface_absent_class_and_spacing():
    m = np.zeros((4, 4), dtype=int)
    with pytest.raises(DataError):
        surface_distances(m, m, 1)
    a, b = m.copy(), m.copy()
    a[1, 0] = 1
    b[1, 3] = 1
    assert surface_distances(a, b, 1, spacing=2.0) == pytest.approx((6.0, 6.0))
    assert surface_distances(a, m, 1) == (math.inf, math.inf)


def test_report_and_csv():
    t = np.zeros((6, 6), dtype=int)
    t[1:5, 1:5] = 1
    t[2:4, 2:4] = 2
    rep = evaluate_sample(t, t, 3, sample_id=7)
    assert rep.mean_dice == 1.0 and rep.hd95 == 0.0
    text = reports_to_csv([rep], header="# test\n")
    lines = text.splitlines()
    assert lines[0] == "# test"
    assert lines[1] == "sample_id,class,dice,hd95,asd"
    assert lines[2].startswith("7,0,1.000000")
    assert len(lines) == 5
