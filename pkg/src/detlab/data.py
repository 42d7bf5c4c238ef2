"""Synthetic crowded scenes: controllable object count and overlap.

Scenes are lists of normalized boxes placed either disjointly or in chains
of overlapping neighbors whose pairwise IoU tracks a per-scene crowd level.
Rendering rasterizes count, edge, and size channels — enough signal for a
small encoder to count overlapping instances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, iou_matrix
from .errors import ConfigError, UsageError

log = logging.getLogger("detlab")


@dataclass(frozen=True)
class DatasetSpec:
    n_images: int = 250
    object_count_range: tuple = (1, 12)
    size_range: tuple = (0.1, 0.3)
    crowd_level_range: tuple = (0.0, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 0:
            raise ConfigError("n_images must be ≥ 0")
        for name in ("object_count_range", "size_range", "crowd_level_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")
        if self.object_count_range[0] < 0:
            raise ConfigError("object counts must be ≥ 0")
        if self.size_range[0] <= 0 or self.size_range[1] > 0.95:
            raise ConfigError("size_range must sit inside (0, 0.95]")
        if self.crowd_level_range[0] < 0 or self.crowd_level_range[1] > 1:
            raise ConfigError("crowd_level_range must sit inside [0, 1]")


@dataclass
class Scene:
    id: int
    gt_boxes: list
    crowd_level: float

    def boxes_array(self):
        if not self.gt_boxes:
            return np.zeros((0, 4))
        return np.stack([b.to_array() for b in self.gt_boxes])


def scene_rng(seed: int, scene_id: int):
    return np.random.default_rng(np.random.SeedSequence((seed, scene_id)))


def _sample_center(rng, w, h):
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.array([cx, cy, w, h])


def _clamp_center(box):
    out = box.copy()
    out[0] = min(max(out[0], out[2] / 2), 1 - out[2] / 2)
    out[1] = min(max(out[1], out[3] / 2), 1 - out[3] / 2)
    return out


def _place_seed(existing, rng, w, h, attempts=1000):
    """A box disjoint from everything placed so far; after `attempts`
    failures the overlap constraint is dropped with a warning."""
    best = None
    best_overlap = np.inf
    for _ in range(attempts):
        cand = _sample_center(rng, w, h)
        overlap = iou_matrix(cand[None], existing).max() if len(existing) else 0.0
        if overlap == 0.0:
            return cand
        if overlap < best_overlap:
            best, best_overlap = cand, overlap
    log.warning("disjoint placement failed after %d attempts; relaxing", attempts)
    return best


_STEPS = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0))


def _place_boxes(count, crowd, size_range, rng):
    """Cluster chains: members sit one axis-offset apart so consecutive
    pairs have IoU (1−f)/(1+f) = crowd for offset fraction f."""
    if count == 0:
        return []
    rows = []
    existing = np.zeros((0, 4))
    f = (1 - crowd) / (1 + crowd)
    remaining = count
    while remaining > 0:
        if crowd < 0.02 or remaining == 1:
            cluster_n = 1
        else:
            cluster_n = min(remaining, int(rng.integers(2, 5)))
        w = rng.uniform(*size_range)
        h = min(w * rng.uniform(1.0, 1.6), 0.9)
        seed_box = _place_seed(existing, rng, w, h)
        chain = [seed_box]
        last_step = None
        for _ in range(cluster_n - 1):
            options = [
                s for s in _STEPS
                if last_step is None or s != (last_step[0], -last_step[1])
            ]
            rng.shuffle(options)
            placed = None
            fallback = None
            for axis, sign in options:
                cand = chain[-1].copy()
                cand[axis] += sign * f * cand[2 + axis]
                clamped = _clamp_center(cand)
                if fallback is None:
                    fallback = (clamped, (axis, sign))
                if np.array_equal(clamped, cand):
                    placed = (clamped, (axis, sign))
                    break
            if placed is None:
                placed = fallback
            chain.append(placed[0])
            last_step = placed[1]
        rows.extend(chain)
        existing = np.asarray(rows).reshape(-1, 4)
        remaining -= cluster_n
    return [Box(*row) for row in rows]


def generate_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = scene_rng(spec.seed, scene_id)
    lo, hi = spec.object_count_range
    count = int(rng.integers(lo, hi + 1))
    crowd = float(rng.uniform(*spec.crowd_level_range))
    return Scene(
        id=scene_id,
        gt_boxes=_place_boxes(count, crowd, spec.size_range, rng),
        crowd_level=crowd,
    )


def generate_dataset(spec: DatasetSpec):
    return [generate_scene(spec, i) for i in range(spec.n_images)]


def mean_neighbor_iou(boxes) -> float:
    """Mean over boxes of the highest IoU with any other box; scenes with
    fewer than two boxes give 0."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] < 2:
        return 0.0
    pairwise = iou_matrix(boxes, boxes)
    np.fill_diagonal(pairwise, 0.0)
    return float(pairwise.max(axis=1).mean())


def render_scene(scene: Scene, image_size: int):
    """(3, H, W) float image: covering-box count (clamped at 4, scaled to
    [0,1]), box-edge ring indicator, and size of the smallest covering box.
    A pixel is covered when its center falls inside the box corners."""
    h = w = image_size
    out = np.zeros((3, h, w))
    boxes = scene.boxes_array()
    if boxes.shape[0] == 0:
        return out
    px = (np.arange(w) + 0.5) / w
    py = (np.arange(h) + 0.5) / h
    pitch_x, pitch_y = 1.0 / w, 1.0 / h
    counts = np.zeros((h, w))
    edges = np.zeros((h, w))
    smallest = np.full((h, w), np.inf)
    for cx, cy, bw, bh in boxes:
        x1, y1, x2, y2 = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
        in_x = (px >= x1) & (px <= x2)
        in_y = (py >= y1) & (py <= y2)
        cover = np.outer(in_y, in_x)
        inner_x = (px >= x1 + pitch_x) & (px <= x2 - pitch_x)
        inner_y = (py >= y1 + pitch_y) & (py <= y2 - pitch_y)
        ring = cover & ~np.outer(inner_y, inner_x)
        counts += cover
        edges = np.maximum(edges, ring)
        size = np.sqrt(bw * bh)
        smallest = np.where(cover & (size < smallest), size, smallest)
    out[0] = np.minimum(counts, 4.0) / 4.0
    out[1] = edges
    out[2] = np.where(np.isfinite(smallest), smallest, 0.0)
    return out


def save_dataset(scenes, path):
    """JSON-lines, one scene per line; float repr keeps round-trips exact."""
    path = Path(path)
    lines = [
        json.dumps(
            {
                "id": s.id,
                "crowd_level": s.crowd_level,
                "boxes": [[b.cx, b.cy, b.w, b.h] for b in s.gt_boxes],
            },
            separators=(",", ":"),
        )
        for s in scenes
    ]
    path.write_text("".join(line + "\n" for line in lines))


def load_dataset(path):
    path = Path(path)
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                scenes.append(
                    Scene(
                        id=int(rec["id"]),
                        gt_boxes=[Box(*row) for row in rec["boxes"]],
                        crowd_level=float(rec["crowd_level"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise UsageError(f"{path}:{lineno}: malformed scene record: {err}") from err
    return scenes
