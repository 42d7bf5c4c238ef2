"""One-to-one assignment between predictions and ground truth.

A DETR-style cost (negated score, GIoU gap, coordinate L1) feeds the
Hungarian algorithm; matched predictions become positive training samples
and the rest negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import giou_matrix
from .errors import NumericError, UsageError


@dataclass
class Assignment:
    """Minimum-cost pairing; `pairs` holds (prediction_index, gt_index)."""

    pairs: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    @property
    def prediction_indices(self):
        return [i for i, _ in self.pairs]

    @property
    def gt_indices(self):
        return [j for _, j in self.pairs]


def hungarian(cost):
    """Minimum-total-cost one-to-one assignment covering min(rows, cols)
    pairs; pairs come back sorted by prediction index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise UsageError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_pred = cost.shape[0]
    if n_pred < 1:
        raise UsageError("cost matrix needs at least one row")
    if cost.shape[1] == 0:
        return Assignment(pairs=[], unmatched=list(range(n_pred)))
    if not np.isfinite(cost).all():
        raise NumericError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {i for i, _ in pairs}
    return Assignment(
        pairs=[tuple(p) for p in pairs],
        unmatched=[i for i in range(n_pred) if i not in matched],
    )


def detr_cost(scores, pred_boxes, gt_boxes):
    """cost[i][j] = 2·(−score_i) + 2·(1 − giou_ij) + 5·mean|Δcoord|_ij.

    Boxes are (n, 4) / (m, 4) normalized center-form arrays; an empty GT
    list yields an (n, 0) matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(len(scores), 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return np.zeros((len(scores), 0))
    giou = giou_matrix(pred_boxes, gt_boxes)
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).mean(axis=2)
    return 2.0 * (-scores)[:, None] + 2.0 * (1.0 - giou) + 5.0 * l1


def match(scores, pred_boxes, gt_boxes):
    """Assignment under the standard cost; shorthand for the common path."""
    return hungarian(detr_cost(scores, pred_boxes, gt_boxes))
