"""Detection AP with region filters and set IoU for free-road and occupancy masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frames import CLASSES, BoxLabel
from .geometry import bev_iou_raw
from .heads import Detection

IOU_THRESHOLDS = (0.5, 0.25, 0.25)  # car, pedestrian, cyclist
RECALL_POINTS = np.linspace(0.0, 1.0, 11)


def bev_iou(a: BoxLabel, b: BoxLabel) -> float:
    """Rotated-footprint IoU; zero for degenerate boxes."""
    return bev_iou_raw(a.bev, b.bev)


@dataclass(frozen=True)
class EvalRegion:
    kind: str = "entire"
    x_range: tuple[float, float] = (0.0, 25.0)
    y_range: tuple[float, float] = (-4.0, 4.0)

    def __post_init__(self):
        if self.kind not in ("entire", "corridor"):
            raise ValueError(f"unknown region kind {self.kind!r}")

    def contains(self, box: BoxLabel) -> bool:
        if self.kind == "entire":
            return True
        return self.x_range[0] <= box.cx <= self.x_range[1] and self.y_range[0] <= box.cy <= self.y_range[1]


ENTIRE = EvalRegion("entire")
CORRIDOR = EvalRegion("corridor")


@dataclass
class PRCurve:
    scores: np.ndarray
    tp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int
    ap: float


def average_precision_11(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean over recall levels 0, 0.1, ..., 1 of the best precision at recall >= level."""
    total = 0.0
    for r in RECALL_POINTS:
        ok = recall >= r - 1e-12
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / len(RECALL_POINTS)


def pr_curve(preds: list[Detection], gts: list[list[BoxLabel]], cls: int, threshold: float,
             region: EvalRegion = ENTIRE) -> PRCurve:
    """Greedy matching of one class over all frames.

    ``gts[f]`` holds the boxes of frame index ``f``; a prediction's ``frame_id``
    indexes that list. Predictions are visited by descending score (stable), and
    each takes the unmatched ground truth of highest IoU in its frame.
    """
    gt_cls = [[g for g in frame if g.cls == cls and region.contains(g)] for frame in gts]
    used = [np.zeros(len(g), dtype=bool) for g in gt_cls]
    cand = [p for p in preds if p.cls == cls and region.contains(p.box)]
    order = sorted(range(len(cand)), key=lambda i: -cand[i].score)
    tp = np.zeros(len(cand), dtype=bool)
    for rank, i in enumerate(order):
        p = cand[i]
        frame = gt_cls[p.frame_id]
        best, best_iou = -1, -1.0
        for j, g in enumerate(frame):
            if used[p.frame_id][j]:
                continue
            iou = bev_iou(p.box, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= threshold:
            used[p.frame_id][best] = True
            tp[rank] = True
    n_gt = sum(len(g) for g in gt_cls)
    scores = np.array([cand[i].score for i in order])
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    ap = average_precision_11(precision, recall) if n_gt else math.nan
    return PRCurve(scores, tp, precision, recall, n_gt, ap)


def evaluate_detection(preds: list[Detection], gts: list[list[BoxLabel]], region: EvalRegion = ENTIRE,
                       thresholds=IOU_THRESHOLDS) -> dict:
    """Per-class AP and mAP. Classes without ground truth in the region report ``nan`` and are
    left out of the mean; if every class is ``nan`` the mAP is 0."""
    aps = [pr_curve(preds, gts, c, thresholds[c], region).ap for c in range(len(CLASSES))]
    valid = [a for a in aps if not math.isnan(a)]
    return {"ap": dict(zip(CLASSES, aps)), "map": float(np.mean(valid)) if valid else 0.0}


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    return float(np.logical_and(pred, gt).sum() / union) if union else 1.0


def evaluate_free_road(pred_free, gt_free, pred_occ, gt_occ) -> tuple[float, float]:
    return mask_iou(pred_free, gt_free), mask_iou(pred_occ, gt_occ)
