"""IoU and per-class average precision for spatial action detection."""

from __future__ import annotations

from collections import defaultdict
from fractions import Fraction
from typing import Sequence

from .action_detection import Detection
from .core_data import ActionInstance, Box


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _envelope_ap(tp_flags: Sequence[bool], n_gt: int) -> Fraction:
    """All-point interpolated AP from TP/FP flags in score order, computed exactly."""
    rec, prec = [], []
    tp = 0
    for i, hit in enumerate(tp_flags, start=1):
        tp += hit
        rec.append(Fraction(tp, n_gt))
        prec.append(Fraction(tp, i))
    mrec = [Fraction(0)] + rec + [Fraction(1)]
    mpre = [Fraction(0)] + prec + [Fraction(0)]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return sum(
        ((mrec[i + 1] - mrec[i]) * mpre[i + 1] for i in range(len(mrec) - 1) if mrec[i + 1] != mrec[i]),
        Fraction(0),
    )


def match_detections(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[ActionInstance]],
    cls: int,
    iou_thresh: float,
) -> list[bool]:
    """TP/FP flag per detection of class ``cls``, in descending score order.

    Ties in score keep (frame, position) order. Each detection takes the
    highest-IoU still-unmatched ground truth of its frame and class, if that IoU
    reaches ``iou_thresh``.
    """
    pooled = [
        (d.score, f, j, d)
        for f, frame_dets in enumerate(dets)
        for j, d in enumerate(frame_dets)
        if d.action_class == cls
    ]
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    gt_boxes = [[g.box for g in frame_gts if g.action_class == cls] for frame_gts in gts]
    used = [[False] * len(b) for b in gt_boxes]
    flags = []
    for _, f, _, d in pooled:
        best, best_k = -1.0, -1
        for k, g in enumerate(gt_boxes[f]):
            if used[f][k]:
                continue
            o = iou(d.box, g)
            if o >= iou_thresh and o > best:
                best, best_k = o, k
        if best_k >= 0:
            used[f][best_k] = True
        flags.append(best_k >= 0)
    return flags


def mean_average_precision(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[ActionInstance]],
    iou_thresh: float = 0.5,
) -> tuple[float, dict[int, float]]:
    """mAP over classes that have ground truth, plus per-class AP.

    ``dets[i]`` and ``gts[i]`` belong to the same frame.
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError("IoU threshold must lie in (0, 1]")
    if len(dets) != len(gts):
        raise ValueError("need one detection list per ground-truth frame")
    n_gt = defaultdict(int)
    for frame_gts in gts:
        for g in frame_gts:
            n_gt[g.action_class] += 1
    if not n_gt:
        raise ValueError("no ground truth to evaluate against")
    per_class = {}
    for cls in sorted(n_gt):
        flags = match_detections(dets, gts, cls, iou_thresh)
        per_class[cls] = _envelope_ap(flags, n_gt[cls])
    mean = sum(per_class.values(), Fraction(0)) / len(per_class)
    return float(mean), {k: float(v) for k, v in per_class.items()}
