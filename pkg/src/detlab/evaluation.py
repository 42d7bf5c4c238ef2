"""Detection metrics: greedy matching at an IoU threshold, recall, average
precision with all-point interpolation, and log-average miss rate over a
9-point FPPI reference grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix
from .data import render_scene
from .errors import UsageError

MISS_RATE_FLOOR = 1e-10
FPPI_REFERENCES = np.logspace(-2, 0, 9)


@dataclass
class EvalResult:
    mr: float
    ap: float
    recall: float
    fppi_curve: list = field(default_factory=list)
    pr_curve: list = field(default_factory=list)
    mean_query_count: float = 0.0
    query_counts: list = field(default_factory=list)
    gt_counts: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mr": self.mr,
            "ap": self.ap,
            "recall": self.recall,
            "mean_query_count": self.mean_query_count,
        }


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold=0.5):
    """True/false positive flags for detections sorted by score descending.

    Greedy: in score order, each detection claims the unclaimed GT with the
    highest IoU at or above the threshold; everything else is a false
    positive."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if det_scores.size and (np.diff(det_scores) > 1e-12).any():
        raise UsageError("detections must be sorted by score descending")
    flags = np.zeros(det_boxes.shape[0], dtype=bool)
    if det_boxes.shape[0] == 0 or gt_boxes.shape[0] == 0:
        return flags
    ious = iou_matrix(det_boxes, gt_boxes)
    claimed = np.zeros(gt_boxes.shape[0], dtype=bool)
    for i in range(det_boxes.shape[0]):
        row = np.where(claimed, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            flags[i] = True
            claimed[j] = True
    return flags


def recall_value(flags, n_gt) -> float:
    """TP / n_gt; an empty ground-truth set counts as fully recalled."""
    if n_gt == 0:
        return 1.0
    return float(np.count_nonzero(flags) / n_gt)


def average_precision(flags, n_gt) -> float:
    """Area under the precision-recall curve, precision envelope made
    nonincreasing before integration. Flags must be score-ordered."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    cum_tp = np.cumsum(flags)
    precision = cum_tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags].sum() / n_gt)


def pr_curve_points(flags, n_gt):
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return []
    cum_tp = np.cumsum(flags)
    precision = cum_tp / np.arange(1, flags.size + 1)
    rec = cum_tp / max(n_gt, 1)
    return list(zip(rec.tolist(), precision.tolist()))


def log_average_miss_rate(per_image):
    """(mr, fppi_curve) from per-image (scores, flags, n_gt) triples.

    Sweeps score thresholds jointly across images; at each cut, FPPI is
    total FP / images and miss rate is 1 − recall. Miss rates are sampled
    at 9 log-spaced FPPI references in [1e-2, 1]: for each reference, the
    miss at the largest FPPI not exceeding it, else the highest observed
    miss. MR is the geometric mean with a 1e-10 floor."""
    n_images = len(per_image)
    if n_images < 1:
        raise UsageError("miss rate needs at least one image")
    total_gt = sum(n for _, _, n in per_image)
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s, _, _ in per_image])
    flags = np.concatenate([np.asarray(f, dtype=bool) for _, f, _ in per_image])
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]

    points = [(0.0, 1.0 if total_gt > 0 else 0.0)]
    if scores.size:
        cum_tp = np.cumsum(flags)
        cum_fp = np.cumsum(~flags)
        # cut only where the score changes; equal scores enter together
        cuts = np.nonzero(np.append(np.diff(scores) != 0, True))[0]
        for c in cuts:
            fppi = cum_fp[c] / n_images
            miss = 1.0 - cum_tp[c] / total_gt if total_gt > 0 else 0.0
            points.append((float(fppi), float(miss)))

    best = {}
    for fppi, miss in points:
        best[fppi] = min(best.get(fppi, np.inf), miss)
    observed = sorted(best)
    sampled = []
    for ref in FPPI_REFERENCES:
        under = [f for f in observed if f <= ref]
        miss = best[max(under)] if under else max(best.values())
        sampled.append(max(miss, MISS_RATE_FLOOR))
    mr = float(np.exp(np.mean(np.log(sampled))))
    return mr, [(f, best[f]) for f in observed]


def evaluate(detector, scenes, iou_threshold=0.5) -> EvalResult:
    """Run inference over `scenes` and aggregate pooled metrics."""
    if not scenes:
        raise UsageError("evaluation needs at least one scene")
    per_image = []
    pooled_scores, pooled_flags = [], []
    total_tp = 0
    total_gt = 0
    query_counts, gt_counts = [], []
    for scene in scenes:
        image = render_scene(scene, detector.config.image_size)
        result = detector.infer(image)
        gt = scene.boxes_array()
        order = np.argsort(-result.scores, kind="stable")
        sorted_scores = result.scores[order]
        flags = match_detections(result.boxes[order], sorted_scores, gt, iou_threshold)
        per_image.append((sorted_scores, flags, gt.shape[0]))
        pooled_scores.append(sorted_scores)
        pooled_flags.append(flags)
        total_tp += int(np.count_nonzero(flags))
        total_gt += gt.shape[0]
        query_counts.append(result.count)
        gt_counts.append(gt.shape[0])

    scores = np.concatenate(pooled_scores)
    flags = np.concatenate(pooled_flags)
    order = np.argsort(-scores, kind="stable")
    flags = flags[order]
    ap = average_precision(flags, total_gt)
    recall = 1.0 if total_gt == 0 else total_tp / total_gt
    mr, fppi_curve = log_average_miss_rate(per_image)
    return EvalResult(
        mr=mr,
        ap=ap,
        recall=float(recall),
        fppi_curve=fppi_curve,
        pr_curve=pr_curve_points(flags, total_gt),
        mean_query_count=float(np.mean(query_counts)),
        query_counts=query_counts,
        gt_counts=gt_counts,
    )


def write_curves_csv(result: EvalResult, fppi_path, pr_path):
    with open(fppi_path, "w") as fh:
        fh.write("fppi,miss_rate\n")
        for fppi, miss in result.fppi_curve:
            fh.write(f"{fppi},{miss}\n")
    with open(pr_path, "w") as fh:
        fh.write("recall,precision\n")
        for rec, prec in result.pr_curve:
            fh.write(f"{rec},{prec}\n")
