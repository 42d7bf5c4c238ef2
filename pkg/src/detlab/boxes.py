"""Axis-aligned box geometry in normalized center form (cx, cy, w, h).

Plain-array helpers serve matching and evaluation; the tensor variant of
GIoU participates in the gradient graph for the box regression loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

# Linear map from (cx, cy, w, h) rows to (x1, y1, x2, y2) rows.
_CORNER_MAP = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [-0.5, 0.0, 0.5, 0.0],
        [0.0, -0.5, 0.0, 0.5],
    ]
)


@dataclass(frozen=True)
class Box:
    """One box; coordinates are fractions of the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ConfigError(f"negative box extent: w={self.w}, h={self.h}")
        object.__setattr__(self, "cx", float(min(max(self.cx, 0.0), 1.0)))
        object.__setattr__(self, "cy", float(min(max(self.cy, 0.0), 1.0)))

    def to_corners(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


def corners_of(boxes):
    """Convert (n, 4) center-form rows to (n, 4) corner-form rows."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes @ _CORNER_MAP


def _areas_and_overlap(a, b):
    """Shared plumbing for the (n, m) IoU/GIoU matrices; corner-form input."""
    inter_lo = np.maximum(a[:, None, :2], b[None, :, :2])
    inter_hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter_wh = np.clip(inter_hi - inter_lo, 0.0, None)
    inter = inter_wh[..., 0] * inter_wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter, union


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between (n, 4) and (m, 4) center-form boxes."""
    a = corners_of(boxes_a)
    b = corners_of(boxes_b)
    inter, union = _areas_and_overlap(a, b)
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(boxes_a, boxes_b):
    """Pairwise GIoU; degenerate pairs with zero enclosing area give 0."""
    a = corners_of(boxes_a)
    b = corners_of(boxes_b)
    inter, union = _areas_and_overlap(a, b)
    encl_lo = np.minimum(a[:, None, :2], b[None, :, :2])
    encl_hi = np.maximum(a[:, None, 2:], b[None, :, 2:])
    encl_wh = np.clip(encl_hi - encl_lo, 0.0, None)
    enclosure = encl_wh[..., 0] * encl_wh[..., 1]
    iou = np.zeros_like(union)
    np.divide(inter, union, out=iou, where=union > 0)
    gap = np.zeros_like(union)
    np.divide(enclosure - union, enclosure, out=gap, where=enclosure > 0)
    # union == 0 means both boxes are degenerate: defined as 0.
    return np.where(union > 0, iou - gap, 0.0)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.to_array()[None], b.to_array()[None])[0, 0])


def giou(a: Box, b: Box) -> float:
    return float(giou_matrix(a.to_array()[None], b.to_array()[None])[0, 0])


def _cols(t, indices):
    return ad.transpose(ad.take_rows(ad.transpose(t), indices))


def clamp_extents(boxes, floor=1e-8):
    """Keep w, h at least `floor` inside differentiable paths."""
    ctr = _cols(boxes, [0, 1])
    ext = ad.maximum(_cols(boxes, [2, 3]), ad.Tensor(floor))
    return ad.concat([ctr, ext], axis=1)


def giou_pairs(pred, gt):
    """Elementwise GIoU for aligned pairs; both (n, 4) center-form Tensors.

    Gradients flow to whichever inputs carry requires_grad; extents are
    clamped at 1e-8 so no division by zero can occur.
    """
    pred = clamp_extents(ad.as_tensor(pred))
    gt = clamp_extents(ad.as_tensor(gt))
    a = pred @ ad.Tensor(_CORNER_MAP)
    b = gt @ ad.Tensor(_CORNER_MAP)
    a_lo, a_hi = _cols(a, [0, 1]), _cols(a, [2, 3])
    b_lo, b_hi = _cols(b, [0, 1]), _cols(b, [2, 3])

    def area(lo, hi):
        wh = hi - lo
        return _cols(wh, [0]) * _cols(wh, [1])

    inter_wh = ad.maximum(ad.minimum(a_hi, b_hi) - ad.maximum(a_lo, b_lo), ad.Tensor(0.0))
    inter = _cols(inter_wh, [0]) * _cols(inter_wh, [1])
    union = area(a_lo, a_hi) + area(b_lo, b_hi) - inter
    iou_t = inter / union

    encl_wh = ad.maximum(a_hi, b_hi) - ad.minimum(a_lo, b_lo)
    enclosure = _cols(encl_wh, [0]) * _cols(encl_wh, [1])
    out = iou_t - (enclosure - union) / enclosure
    return out.reshape((pred.shape[0],))
