"""Classification, box, and ranking losses for the detector.

The ranking loss family includes `sgl1`, an L1-style loss defined by its
gradient field rather than by a differentiable expression: the gradient is
a bounded, continuous sigmoid reshaping of the three-valued L1 sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import giou_pairs
from .errors import ConfigError, UsageError


def _sig(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


SIGMOID_ONE = _sig(1.0)
# Largest possible |gradient| of the sgl1 loss: sigmoid(1) - sigmoid(0).
SGL1_GRADIENT_BOUND = SIGMOID_ONE - 0.5

RANKING_LOSS_KINDS = ("sgl1", "l1", "smooth_l1", "l2")


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the composite loss; order: cls, giou, l1, ranking."""

    cls_weight: float = 2.0
    giou_weight: float = 2.0
    l1_weight: float = 5.0
    ranking_weight: float = 0.05

    def __post_init__(self):
        for field in ("cls_weight", "giou_weight", "l1_weight", "ranking_weight"):
            if getattr(self, field) < 0:
                raise ConfigError(f"{field} must be nonnegative")


@dataclass(frozen=True)
class RankingTarget:
    """Detached regression target for the ranking head; always ≥ 1."""

    y: float

    def __post_init__(self):
        # Training targets are scaled ranks (≥ 1), but the gradient field is
        # defined on all of [0, inf): its 1e-8 denominator guard exists for
        # the zero boundary, so validation admits it.
        if not math.isfinite(self.y) or self.y < 0:
            raise UsageError(f"ranking target must be finite and ≥ 0, got {self.y}")


def l1_gradient(y_star: float, y: float) -> float:
    """The three-valued derivative of |y* − y| with respect to y*."""
    if y_star > y:
        return 1.0
    if y_star < y:
        return -1.0
    return 0.0


def sgl1_gradient(y_star: float, y: float) -> float:
    """Sigmoid-shaped replacement for the L1 sign.

    Equal inputs give 0; otherwise the magnitude grows smoothly with the
    ratio gap and saturates at sigmoid(1) − sigmoid(0). Denominators are
    guarded at 1e-8 so y* = 0 stays finite.
    """
    if y_star < 0:
        raise UsageError(f"ranking prediction must be nonnegative, got {y_star}")
    if y_star == y:
        return 0.0
    if y_star > y:
        return SIGMOID_ONE - _sig(y / max(y_star, 1e-8))
    return _sig(y_star / max(y, 1e-8)) - SIGMOID_ONE


def sgl1(y_star, target: RankingTarget):
    """Ranking loss node: the reported value is |y* − y| for monitoring,
    while backward injects the bounded `sgl1_gradient` w.r.t. y*."""
    y_star = ad.as_tensor(y_star)
    if y_star.data.size != 1:
        raise UsageError("ranking prediction must be a scalar")
    value = float(y_star.data.reshape(()))
    grad = sgl1_gradient(value, target.y)
    shape = y_star.data.shape
    return ad.custom_scalar(
        abs(value - target.y), y_star, lambda adj: np.full(shape, grad) * adj
    )


def ranking_loss(kind: str, y_star, target: RankingTarget):
    """Dispatch over the ranking-loss ablation family."""
    if kind == "sgl1":
        return sgl1(y_star, target)
    y_star = ad.as_tensor(y_star)
    diff = y_star - Tensor(target.y)
    if kind == "l1":
        return diff.abs().reshape(())
    if kind == "l2":
        return (diff * diff).reshape(())
    if kind == "smooth_l1":
        # beta = 1.0: quadratic inside the unit band, linear outside.
        if abs(float(diff.data.reshape(()))) < 1.0:
            return (0.5 * diff * diff).reshape(())
        return (diff.abs() - 0.5).reshape(())
    raise ConfigError(f"unknown ranking loss {kind!r}; options: {RANKING_LOSS_KINDS}")


def classification_loss(scores, positive_indices, alpha=0.25, gamma=2.0):
    """Focal loss over per-prediction scores in (0,1).

    Summed over all predictions and divided by the number of positives
    (at least 1). Empty prediction sets give 0.
    """
    scores = ad.as_tensor(scores)
    n = scores.data.size
    if n == 0:
        return Tensor(0.0)
    positives = sorted(set(int(i) for i in positive_indices))
    if positives and (positives[0] < 0 or positives[-1] >= n):
        raise UsageError(f"positive index out of range for {n} predictions")
    mask = np.zeros(n)
    mask[positives] = 1.0
    p = scores.reshape((n,)).clip(1e-7, 1.0 - 1e-7)
    pos_term = -alpha * (1.0 - p).pow(gamma) * ad.log(p)
    neg_term = -(1.0 - alpha) * p.pow(gamma) * ad.log(1.0 - p)
    total = (Tensor(mask) * pos_term + Tensor(1.0 - mask) * neg_term).sum()
    return total / float(max(1, len(positives)))


def box_losses(pred_boxes, gt_boxes):
    """(giou_loss, l1_loss) over matched pairs.

    giou_loss = mean(1 − giou); l1_loss = mean absolute difference over the
    4 normalized coordinates, averaged over pairs. No pairs → (0, 0).
    """
    pred_boxes = ad.as_tensor(pred_boxes)
    k = pred_boxes.data.shape[0] if pred_boxes.data.ndim == 2 else 0
    if k == 0:
        return Tensor(0.0), Tensor(0.0)
    gt = Tensor(np.asarray(gt_boxes, dtype=np.float64).reshape(k, 4))
    giou_loss = (1.0 - giou_pairs(pred_boxes, gt)).mean()
    l1_loss = (pred_boxes - gt).abs().mean()
    return giou_loss, l1_loss


def total_loss(cls_loss, giou_loss, l1_loss, weights: LossWeights, ranking=None):
    """Weighted sum of the components; the ranking term is optional so the
    same composition serves the encoder's auxiliary supervision."""
    out = (
        weights.cls_weight * cls_loss
        + weights.giou_weight * giou_loss
        + weights.l1_weight * l1_loss
    )
    if ranking is not None:
        out = out + weights.ranking_weight * ranking
    return out
