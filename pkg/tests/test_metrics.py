import math

import numpy as np
import pytest

from drift.frames import BoxLabel, SceneConfig, generate_frame
from drift.heads import Detection
from drift.metrics import (
    CORRIDOR, ENTIRE, EvalRegion, average_precision_11, evaluate_detection, evaluate_free_road, mask_iou,
    pr_curve,
)


def car(x, y, l=4.0, w=2.0, yaw=0.0):
    return BoxLabel(x, y, 0.0, l, w, 1.5, yaw, 0)


def ped(x, y, l=4.0, w=2.0):
    return BoxLabel(x, y, 0.0, l, w, 1.7, 0.0, 1)


def det(box, score, frame=0):
    return Detection(box, score, frame)


def test_single_exact_prediction():
    g = car(10, 0)
    assert pr_curve([det(g, 0.5)], [[g]], 0, 0.5).ap == 1.0


def test_one_tp_one_fp_two_gts():
    gts = [[car(10, 0), car(20, 3)]]
    preds = [det(car(10, 0), 0.9), det(car(40, -10), 0.8)]
    c = pr_curve(preds, gts, 0, 0.5)
    np.testing.assert_array_equal(c.tp, [True, False])
    np.testing.assert_allclose(c.precision, [1.0, 0.5])
    np.testing.assert_allclose(c.recall, [0.5, 0.5])
    # recall levels 0..0.5 see precision 1, levels 0.6..1.0 see nothing
    assert c.ap == pytest.approx(6 / 11, abs=1e-15)


def test_tp_fp_tp_three_gts():
    gts = [[car(10, 0), car(20, 3)], [car(5, -5)]]
    preds = [det(car(10, 0), 0.9, 0), det(car(30, 10), 0.8, 0), det(car(5, -5), 0.7, 1)]
    c = pr_curve(preds, gts, 0, 0.5)
    np.testing.assert_allclose(c.precision, [1, 0.5, 2 / 3])
    np.testing.assert_allclose(c.recall, [1 / 3, 1 / 3, 2 / 3])
    # levels 0, .1, .2, .3 -> 1; levels .4, .5, .6 -> 2/3; the rest 0
    assert c.ap == pytest.approx((4 + 3 * 2 / 3) / 11, abs=1e-15)


def test_duplicate_detection_is_false_positive():
    g = car(10, 0)
    c = pr_curve([det(g, 0.9), det(car(10.1, 0), 0.8)], [[g]], 0, 0.5)
    np.testing.assert_array_equal(c.tp, [True, False])
    assert c.ap == 1.0   # the FP comes after full recall


def test_fp_above_tp():
    g = car(10, 0)
    c = pr_curve([det(car(30, 0), 0.9), det(g, 0.8)], [[g]], 0, 0.5)
    assert c.ap == pytest.approx(0.5, abs=1e-15)


def test_region_filter():
    g = car(10, 0)               # inside the corridor
    p = det(car(10, 6), 0.9)     # outside: dropped, gt stays unmatched
    assert pr_curve([p], [[g]], 0, 0.0, CORRIDOR).ap == 0.0
    out = evaluate_detection([p], [[g]], CORRIDOR)
    assert out["ap"]["car"] == 0.0 and math.isnan(out["ap"]["pedestrian"]) and out["map"] == 0.0
    # the same prediction inside the corridor matches at threshold 0
    assert pr_curve([det(car(10, 1.5), 0.9)], [[g]], 0, 0.0, CORRIDOR).ap == 1.0
    # gt outside the corridor is ignored, so there is nothing to score
    assert math.isnan(pr_curve([p], [[car(10, 6)]], 0, 0.5, CORRIDOR).ap)


def test_corridor_bounds_inclusive():
    assert CORRIDOR.contains(car(0, -4)) and CORRIDOR.contains(car(25, 4))
    assert not CORRIDOR.contains(car(25.01, 0))
    assert ENTIRE.contains(car(1e3, -1e3))
    with pytest.raises(ValueError):
        EvalRegion("ring")


def test_class_thresholds():
    # shifted 1.7 m along a 4 m side: IoU = 2.3 / 5.7 ~ 0.40
    gts = [[car(10, 0), ped(20, 0)]]
    preds = [det(car(11.7, 0), 0.9), det(ped(21.7, 0), 0.9)]
    out = evaluate_detection(preds, gts)
    assert out["ap"]["car"] == 0.0
    assert out["ap"]["pedestrian"] == 1.0
    assert math.isnan(out["ap"]["cyclist"])
    assert out["map"] == 0.5


def test_gt_as_prediction_map_exactly_one():
    cfg = SceneConfig(mask_grid=None)
    frames = [generate_frame(cfg, s) for s in range(6)]
    gts = [f.boxes for f in frames]
    preds = [det(b, 1.0, i) for i, boxes in enumerate(gts) for b in boxes]
    assert evaluate_detection(preds, gts)["map"] == 1.0
    corridor = evaluate_detection(preds, gts, CORRIDOR)
    assert all(a == 1.0 or math.isnan(a) for a in corridor["ap"].values())


def test_empty_predictions():
    gts = [[car(10, 0), ped(5, 1)]]
    assert evaluate_detection([], gts)["map"] == 0.0
    assert evaluate_detection([], [[]])["map"] == 0.0


def test_ap_bounds_and_monotone_recall():
    rng = np.random.default_rng(0)
    for _ in range(20):
        gts = [[car(rng.uniform(0, 40), rng.uniform(-10, 10)) for _ in range(4)] for _ in range(3)]
        preds = [det(car(g.cx + rng.normal(0, 1), g.cy + rng.normal(0, 1)), rng.random(), f)
                 for f, fr in enumerate(gts) for g in fr]
        c = pr_curve(preds, gts, 0, 0.5)
        assert 0 <= c.ap <= 1
        assert np.all(np.diff(c.recall) >= 0)


@pytest.mark.parametrize("seed", range(10))
def test_ap_monotone_under_extra_predictions(seed):
    rng = np.random.default_rng(seed)
    gts = [[car(rng.uniform(0, 40), rng.uniform(-10, 10)) for _ in range(5)]]
    preds = [det(car(g.cx + rng.normal(0, 1), g.cy + rng.normal(0, 1)), rng.uniform(0.1, 0.9))
             for g in gts[0]]
    base = pr_curve(preds, gts, 0, 0.5).ap
    fp = det(car(100, 100), 0.0)
    assert pr_curve(preds + [fp], gts, 0, 0.5).ap <= base
    # a new object predicted exactly and ranked first
    extra = car(-50, -50)
    assert pr_curve([det(extra, 1.0)] + preds, [gts[0] + [extra]], 0, 0.5).ap >= base


def test_11_point_interpolation_definition():
    precision = np.array([1.0, 0.5, 0.67, 0.5])
    recall = np.array([0.25, 0.25, 0.5, 0.5])
    # levels 0..0.2 -> 1, 0.3..0.5 -> 0.67, 0.6..1 -> 0
    assert average_precision_11(precision, recall) == pytest.approx((3 + 3 * 0.67) / 11)


# ---------------------------------------------------------------- masks

def test_mask_iou_fixtures():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0
    with pytest.raises(ValueError):
        mask_iou(a, np.zeros((4, 5), bool))


@pytest.mark.parametrize("seed", range(10))
def test_mask_iou_vs_counting(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((2, 13, 17)) < rng.random()
    inter = union = 0
    for i in range(13):
        for j in range(17):
            inter += bool(p[i, j] and g[i, j])
            union += bool(p[i, j] or g[i, j])
    assert mask_iou(p, g) == inter / union
    free, occ = evaluate_free_road(p, g, g, p)
    assert free == occ == inter / union
