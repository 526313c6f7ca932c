from __future__ import annotations

import numpy as np
import pytest
import torch

from surgseg.errors import InputError
from surgseg.metrics import (
    FrameScore,
    SegReport,
    aggregate,
    format_percent,
    frame_score,
    pixel_counts,
    pooled_score,
)


from helpers import counting_oracle


def test_identical_nonempty_masks_score_one():
    m = torch.zeros(8, 8, dtype=torch.bool)
    m[2:5, 3:6] = True
    score = frame_score(m, m)
    assert score.iou == score.dice == score.acc == 1.0


def test_disjoint_masks_score_zero_overlap():
    a = torch.zeros(8, 8, dtype=torch.bool)
    b = torch.zeros(8, 8, dtype=torch.bool)
    a[0:2] = True
    b[4:6] = True
    score = frame_score(a, b)
    assert score.iou == 0.0 and score.dice == 0.0


def test_worked_example_counts():
    # 16-pixel grid, gt 4 px, pred 4 px, overlap 2 px
    gt = np.zeros((4, 4), dtype=bool)
    pred = np.zeros((4, 4), dtype=bool)
    gt.flat[[0, 1, 2, 3]] = True
    pred.flat[[2, 3, 4, 5]] = True
    assert pixel_counts(pred, gt) == (2, 2, 2, 10)
    score = frame_score(pred, gt)
    assert score.iou == pytest.approx(1 / 3)
    assert score.dice == pytest.approx(0.5)
    assert score.acc == pytest.approx(0.5 * (2 / 4 + 10 / 12))
    # dice = 2 iou / (1 + iou) cross-check
    assert score.dice == pytest.approx(2 * score.iou / (1 + score.iou))


def test_dice_iou_law_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pred = rng.random((12, 12)) < rng.uniform(0.05, 0.6)
        gt = rng.random((12, 12)) < rng.uniform(0.05, 0.6)
        s = frame_score(pred, gt)
        assert abs(s.dice - 2 * s.iou / (1 + s.iou)) <= 1e-12


def test_promoting_a_missed_pixel_never_hurts():
    rng = np.random.default_rng(1)
    tried = 0
    while tried < 100:
        pred = rng.random((10, 10)) < 0.3
        gt = rng.random((10, 10)) < 0.3
        missed = np.argwhere(gt & ~pred)
        if missed.size == 0:
            continue
        tried += 1
        before = frame_score(pred, gt)
        y, x = missed[0]
        pred2 = pred.copy()
        pred2[y, x] = True
        after = frame_score(pred2, gt)
        assert after.iou >= before.iou
        assert after.dice >= before.dice
        assert after.acc >= before.acc


def test_empty_gt_conventions():
    empty = np.zeros((6, 6), dtype=bool)
    assert frame_score(empty, empty) == FrameScore(0, 1.0, 1.0, 1.0)
    pred = empty.copy()
    pred[0, 0] = True
    s = frame_score(pred, empty)
    assert s.iou == 0.0 and s.dice == 0.0
    assert s.acc == pytest.approx(0.5 * (1.0 + 35 / 36))


def test_pixel_accuracy_flag():
    gt = np.zeros((4, 4), dtype=bool)
    gt[0] = True
    pred = np.zeros((4, 4), dtype=bool)
    pred[0, :2] = True
    class_mean = frame_score(pred, gt).acc
    plain = frame_score(pred, gt, pixel_acc=True).acc
    assert plain == pytest.approx(14 / 16)
    assert class_mean == pytest.approx(0.5 * (2 / 4 + 12 / 12))


def test_scores_match_counting_oracle_exactly():
    rng = np.random.default_rng(2)
    for _ in range(300):
        pred = rng.random((16, 16)) < rng.uniform(0.0, 1.0)
        gt = rng.random((16, 16)) < rng.uniform(0.0, 1.0)
        tp, fp, fn, tn = counting_oracle(pred, gt)
        s = frame_score(pred, gt)
        union = tp + fp + fn
        assert s.iou == (1.0 if union == 0 else tp / union)
        assert s.dice == (1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        frame_score(np.zeros((4, 4), dtype=bool), np.zeros((4, 5), dtype=bool))


def test_aggregate_means_and_formatting():
    one = aggregate([FrameScore(0, 0.5, 0.5, 0.5)])
    assert one.formatted()["mIoU"] == "50.00"
    two = aggregate([FrameScore(0, 0.2, 0.2, 0.2), FrameScore(1, 0.6, 0.6, 0.6)])
    assert two.formatted()["mIoU"] == "40.00"
    with pytest.raises(InputError):
        aggregate([])


def test_rounding_is_half_up_not_bankers():
    assert format_percent(40.125) == "40.13"
    assert format_percent(91.375) == "91.38"
    assert format_percent(50.0) == "50.00"


def test_pooled_score_differs_from_per_frame_mean():
    # one perfect small frame, one poor large frame: pooling weights by pixels
    small_gt = np.ones((2, 2), dtype=bool)
    big_gt = np.ones((8, 8), dtype=bool)
    big_pred = np.zeros((8, 8), dtype=bool)
    big_pred[0] = True  # 8 of 64
    per_frame = aggregate([frame_score(small_gt, small_gt), frame_score(big_pred, big_gt)])
    pooled = pooled_score([(small_gt, small_gt), (big_pred, big_gt)])
    assert per_frame.mean_iou == pytest.approx((1.0 + 8 / 64) / 2)
    assert pooled.iou == pytest.approx((4 + 8) / (4 + 64))
    with pytest.raises(InputError):
        pooled_score([])


def test_report_json_roundtrip(tmp_path):
    report = aggregate(
        [FrameScore(0, 0.5, 2 / 3, 0.75), FrameScore(1, 1.0, 1.0, 1.0)],
        dataset="synthetic",
        model="tuned",
    )
    path = tmp_path / "report.json"
    report.save_json(path)
    loaded = SegReport.load_json(path)
    assert loaded.dataset == "synthetic" and loaded.model == "tuned"
    assert loaded.scores == report.scores
    assert loaded.mean_iou == pytest.approx(report.mean_iou)
