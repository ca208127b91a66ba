import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.exceptions import DimensionMismatchError
from semsplat.metrics import (MetricReport, confusion_matrix, depth_metrics, depth_validity, psnr, seg_metrics,
                              ssim)

from oracles import confusion_naive, ssim_direct


def test_psnr_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(DimensionMismatchError):
        psnr(a, np.zeros((4, 4)))


def test_ssim_identity_and_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(20, 17, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    y = np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1)
    assert abs(ssim(x, y) - ssim_direct(x, y)) < 1e-6
    with pytest.raises(DimensionMismatchError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_depth_scaled_predictions():
    gt = np.random.default_rng(2).uniform(1, 5, size=(6, 6))
    rel, tau = depth_metrics(1.02 * gt, gt)
    assert rel == pytest.approx(2.0, abs=1e-9) and tau == 100.0
    assert depth_metrics(1.05 * gt, gt)[1] == 0.0
    assert depth_metrics(gt / 1.05, gt)[1] == 0.0


def test_depth_mask_and_empty():
    gt = np.ones((2, 2))
    pred = np.array([[1.0, 2.0], [1.0, 1.0]])
    mask = np.array([[True, False], [True, True]])
    assert depth_metrics(pred, gt, mask) == (0.0, 100.0)
    assert all(math.isnan(v) for v in depth_metrics(pred, gt, np.zeros((2, 2), bool)))
    alpha = np.array([[0.6, 0.5], [0.9, 0.9]])
    assert depth_validity(alpha, np.array([[1.0, 1.0], [0.0, np.nan]])).tolist() == [[True, False], [False, False]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metrics_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(0.1, 5, (5, 5)), rng.uniform(0.1, 5, (5, 5))
    rel, tau = depth_metrics(p, g)
    assert rel >= 0 and 0 <= tau <= 100
    pl, gl = rng.integers(0, 5, (6, 6)), rng.integers(0, 5, (6, 6))
    miou, acc, per = seg_metrics(pl, gl, 4)
    if not math.isnan(miou):
        assert 0 <= miou <= 1 and 0 <= acc <= 1
        assert all(0 <= v <= 1 for v in per.values())
    x, y = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    assert -1 <= ssim(x, y) <= 1


def test_confusion_matches_naive():
    rng = np.random.default_rng(3)
    p, g = rng.integers(0, 6, 500), rng.integers(0, 6, 500)
    np.testing.assert_array_equal(confusion_matrix(p, g, 5), confusion_naive(p, g, 5))


def test_seg_metrics_hand_example():
    gt = np.array([0, 0, 1, 1, 2, 3])
    pred = np.array([0, 1, 1, 1, 0, 2])
    miou, acc, per = seg_metrics(pred, gt, 3)
    # class 3 is void in gt; class ious: 0 -> 1/3, 1 -> 2/3, 2 -> 0
    assert per == pytest.approx({0: 1 / 3, 1: 2 / 3, 2: 0.0})
    assert miou == pytest.approx(1 / 3)
    assert acc == pytest.approx(3 / 5)


def test_pred_void_counts_as_miss_and_absent_classes_skipped():
    gt = np.array([0, 0, 0])
    miou, acc, per = seg_metrics(np.array([0, 0, 5]), gt, 3)
    assert miou == pytest.approx(2 / 3) and acc == pytest.approx(2 / 3)
    assert list(per) == [0]


def test_report_serializes_inf():
    rep = MetricReport(psnr=math.inf, rel=math.nan, per_class_iou={0: 1.0})
    d = rep.to_dict()
    assert d["psnr"] == "inf" and d["rel"] is None and d["per_class_iou"] == {"0": 1.0}
