"""IoU matching, all-point interpolated AP, and mAP at a fixed IoU threshold."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, iou

__all__ = ["MatchResult", "average_precision", "iou", "map_at", "match", "evaluate_detections"]


@dataclass
class MatchResult:
    tp: list[bool]          # per detection, in descending-score order
    scores: list[float]
    gt_matched: list[bool]


def match(detections: Sequence[tuple[float, BoundingBox]], ground_truths: Sequence[BoundingBox],
          iou_threshold: float) -> MatchResult:
    """Greedy score-ordered matching of single-class detections to ground truths.

    Each detection takes the unmatched ground truth of highest IoU, provided
    that IoU reaches the threshold.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][0])
    matched = [False] * len(ground_truths)
    tp, scores = [], []
    for i in order:
        score, box = detections[i]
        best, best_j = iou_threshold, -1
        for j, gt in enumerate(ground_truths):
            if matched[j]:
                continue
            o = iou(box, gt)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            matched[best_j] = True
        tp.append(best_j >= 0)
        scores.append(score)
    return MatchResult(tp, scores, matched)


def ap_from_flags(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    flags = np.asarray(tp, dtype=float)
    ctp = np.cumsum(flags)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(flags) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections, ground_truths, iou_threshold: float = 0.5) -> float:
    """AP for one class over one or many images.

    ``detections`` / ``ground_truths`` are either flat lists for a single image
    (``(score, box)`` pairs and boxes) or lists of such lists, one per image.
    Detections from all images are ranked jointly by score.
    """
    if ground_truths and isinstance(ground_truths[0], (list, tuple)):
        images = list(zip(detections, ground_truths))
    else:
        images = [(detections, ground_truths)]
    ranked, n_gt = [], 0
    for dets, gts in images:
        m = match(dets, gts, iou_threshold)
        ranked.extend(zip(m.scores, m.tp))
        n_gt += len(gts)
    ranked.sort(key=lambda x: -x[0])
    return ap_from_flags([t for _, t in ranked], n_gt)


def map_at(per_class: dict[int, tuple[list, list]], iou_threshold: float = 0.5) -> float:
    """Mean AP over classes that have at least one ground truth.

    ``per_class[c] = (detections_per_image, ground_truths_per_image)``.
    Returns NaN when no class has a ground truth.
    """
    aps = []
    for c in sorted(per_class):
        dets, gts = per_class[c]
        if sum(len(g) for g in gts) == 0:
            continue
        aps.append(average_precision(dets, gts, iou_threshold))
    return float(np.mean(aps)) if aps else float("nan")


def group_by_class(detections_per_image, annotations_per_image, num_classes: int) -> dict[int, tuple[list, list]]:
    out = {}
    for c in range(num_classes):
        dets = [[(d.score, d.box) for d in dets if d.class_id == c] for dets in detections_per_image]
        gts = [[b for k, b in anns if k == c] for anns in annotations_per_image]
        out[c] = (dets, gts)
    return out


def evaluate_detections(detections_per_image, annotations_per_image, num_classes: int,
                        thresholds=(0.5, 0.75)) -> dict[float, float]:
    grouped = group_by_class(detections_per_image, annotations_per_image, num_classes)
    return {t: map_at(grouped, t) for t in thresholds}
