"""11-point interpolated average precision over rotated BEV boxes."""
from __future__ import annotations

import numpy as np

from ..detect import bev_iou

IOU_THRESHOLDS = (0.3, 0.5, 0.7)


def match_frame(detections, ground_truth, iou_thresh):
    """Greedy score-ordered matching within one frame.

    Returns a list of (score, is_true_positive) for every detection.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    taken = np.zeros(len(ground_truth), bool)
    out = []
    for i in order:
        d = detections[i]
        best, best_j = iou_thresh, -1
        for j, g in enumerate(ground_truth):
            if taken[j]:
                continue
            iou = bev_iou(d.footprint, g.footprint)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
        out.append((d.score, best_j >= 0))
    return out


def average_precision(frames, iou_thresh):
    """AP over ``frames`` = [(detections, ground_truth), ...].

    Precision is interpolated at recall 0, 0.1, ..., 1. With no ground truth
    at all the AP is 0.
    """
    records = []
    n_gt = 0
    for dets, gts in frames:
        records.extend(match_frame(dets, gts, iou_thresh))
        n_gt += len(gts)
    if n_gt == 0 or not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    tp = np.cumsum([r[1] for r in records])
    fp = np.cumsum([not r[1] for r in records])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 11)


def ap_table(frames, thresholds=IOU_THRESHOLDS):
    return {t: average_precision(frames, t) for t in thresholds}
