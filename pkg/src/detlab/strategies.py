"""Query-count strategies: rank-derived adaptive counts plus two fixed-count
baselines, the supplement arithmetic, and the query-budget audit.

The adaptive strategy reads the rank of the worst-scoring positive proposal
("how deep into the score ordering must we go to cover every object"),
scales it by (1+M) for slack, and sizes the decoder's query set from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix
from .errors import ConfigError, NumericError

STRATEGY_KINDS = ("learnable_parameters", "two_stage", "raqg")


@dataclass(frozen=True)
class QueryStrategy:
    """How many queries feed the decoder, and where they come from."""

    kind: str
    fixed_queries: int = 0
    m: int = 5
    removal: bool = True
    x_min: int = 1
    x_max: int = 64

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; options: {STRATEGY_KINDS}")
        if self.kind != "raqg" and self.fixed_queries < 1:
            raise ConfigError("fixed strategies need fixed_queries ≥ 1")
        if self.m < 0:
            raise ConfigError("supplement multiplier must be ≥ 0")
        if not 1 <= self.x_min <= self.x_max:
            raise ConfigError(f"bad query bounds ({self.x_min}, {self.x_max})")

    @property
    def bounds(self):
        return (self.x_min, self.x_max)


@dataclass(frozen=True)
class RankingLabel:
    """Training target derived from the encoder's score ordering."""

    base_rank: int
    scaled: float

    def __post_init__(self):
        if self.base_rank < 1:
            raise ConfigError(f"base rank must be ≥ 1, got {self.base_rank}")


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _clamp(x: int, bounds) -> int:
    return max(bounds[0], min(bounds[1], x))


def score_ranks(scores):
    """1-based rank per proposal under stable descending score order
    (equal scores rank earlier for lower token indices)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def ranking_label(proposal_scores, assignment, m: int):
    """Rank of the lowest-scoring positive proposal, and its (1+M)-scaled
    form. Returns None when the assignment has no positives (empty GT):
    the caller skips the ranking loss for that image."""
    positives = assignment.prediction_indices
    if not positives:
        return None
    ranks = score_ranks(proposal_scores)
    base = int(max(ranks[i] for i in positives))
    return RankingLabel(base_rank=base, scaled=float((1 + m) * base))


def supplement_count(r: float, m: int, bounds=(1, 64)) -> int:
    """X = clamp(round((1+M)·R)); the slack factor keeps the query budget
    above the object count even when R is slightly underpredicted."""
    if not math.isfinite(r):
        raise NumericError(f"rank prediction is non-finite: {r}")
    if r < 0:
        raise ConfigError(f"rank prediction must be ≥ 0, got {r}")
    return _clamp(round_half_up((1 + m) * r), bounds)


def select_count_for_training(label, strategy: QueryStrategy) -> int:
    """Teacher-forced query count: the label-derived count feeds the decoder
    during training (for both variants); a missing label falls back to the
    lower bound."""
    if label is None:
        return strategy.x_min
    return _clamp(round_half_up(label.scaled), strategy.bounds)


def select_count_for_inference(r_pred: float, strategy: QueryStrategy) -> int:
    """Removal variant: the head already predicts the scaled count, so just
    round it. Supplementer variant: the head predicts the base rank and the
    (1+M) factor is applied here."""
    if not math.isfinite(r_pred):
        raise NumericError(f"rank prediction is non-finite: {r_pred}")
    if r_pred < 0:
        raise ConfigError(f"rank prediction must be ≥ 0, got {r_pred}")
    if strategy.removal:
        return _clamp(round_half_up(r_pred), strategy.bounds)
    return supplement_count(r_pred, strategy.m, strategy.bounds)


def ranking_target_for(label, strategy: QueryStrategy):
    """What the ranking head should regress to: the scaled count for the
    removal variant, the raw base rank for the supplementer variant."""
    if label is None:
        return None
    return float(label.scaled) if strategy.removal else float(label.base_rank)


def baseline_counts(strategy: QueryStrategy, token_count: int) -> int:
    """Fixed strategies use the same K on every image."""
    if strategy.kind == "raqg":
        raise ConfigError("baseline_counts applies to fixed strategies only")
    if strategy.fixed_queries > token_count:
        raise ConfigError(
            f"fixed_queries {strategy.fixed_queries} exceeds token count {token_count}"
        )
    return strategy.fixed_queries


def guideline_audit(queries, gt_boxes) -> dict:
    """Audit of the query budget for one image.

    Reports whether the count covers the objects, how densely anchors pile
    up, whether every object has a nearby anchor, and the positive:negative
    split the decoder's matcher will see.
    """
    anchors = np.asarray(queries.anchor_array(), dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    x = anchors.shape[0]
    n_gt = gt.shape[0]

    if x >= 2:
        pairwise = iou_matrix(anchors, anchors)
        np.fill_diagonal(pairwise, 0.0)
        density = float(pairwise.max())
    else:
        density = 0.0

    if n_gt and x:
        cover = iou_matrix(anchors, gt).max(axis=0)
        coverage_ok = bool((cover > 0.3).all())
    else:
        coverage_ok = n_gt == 0

    positives = min(x, n_gt)
    negatives = x - positives
    return {
        "count_ok": bool(x >= n_gt),
        "anchor_density": density,
        "coverage_ok": coverage_ok,
        "positives": int(positives),
        "negatives": int(negatives),
        "pos_neg_ratio": (positives / negatives) if negatives > 0 else None,
    }
