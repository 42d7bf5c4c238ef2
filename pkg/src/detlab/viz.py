"""Static SVG scene plots: ground truth outlines, query anchor centers as
dots, confident detections as translucent fills, and the query count in a
caption line."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

DETECTION_SCORE_FLOOR = 0.3
_GT_STYLE = {"fill": "none", "stroke": "#1f77b4", "stroke-width": "2"}
_DET_STYLE = {
    "fill": "#d62728",
    "fill-opacity": "0.25",
    "stroke": "#d62728",
    "stroke-width": "1.5",
}
_DOT_STYLE = {"fill": "#2ca02c"}


def _rect(parent, box, size, style):
    cx, cy, w, h = (float(v) for v in box)
    ET.SubElement(
        parent,
        "rect",
        {
            "x": f"{(cx - w / 2) * size:.2f}",
            "y": f"{(cy - h / 2) * size:.2f}",
            "width": f"{w * size:.2f}",
            "height": f"{h * size:.2f}",
            **style,
        },
    )


def scene_svg(gt_boxes, anchors, det_boxes, det_scores, query_count, size=512):
    """ElementTree of the overlay plot; queries are drawn as center dots."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)

    root = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": str(size),
            "height": str(size + 24),
            "viewBox": f"0 0 {size} {size + 24}",
        },
    )
    ET.SubElement(
        root, "rect",
        {"x": "0", "y": "0", "width": str(size), "height": str(size), "fill": "#f5f5f5"},
    )
    for box in gt_boxes:
        _rect(root, box, size, _GT_STYLE)
    for box, score in zip(det_boxes, det_scores):
        if score > DETECTION_SCORE_FLOOR:
            _rect(root, box, size, _DET_STYLE)
    for cx, cy, _, _ in anchors:
        ET.SubElement(
            root,
            "circle",
            {"cx": f"{cx * size:.2f}", "cy": f"{cy * size:.2f}", "r": "3", **_DOT_STYLE},
        )
    caption = ET.SubElement(
        root,
        "text",
        {"x": "8", "y": str(size + 17), "font-family": "monospace", "font-size": "14"},
    )
    caption.text = f"X = {query_count}"
    return ET.ElementTree(root)


def write_scene_svg(path, gt_boxes, anchors, det_boxes, det_scores, query_count, size=512):
    tree = scene_svg(gt_boxes, anchors, det_boxes, det_scores, query_count, size)
    ET.indent(tree)
    tree.write(Path(path), encoding="unicode", xml_declaration=True)
    with open(path, "a") as fh:
        fh.write("\n")


def plot_queries(detector, scene, path, size=512):
    """Run inference on `scene` and write the overlay SVG."""
    from .data import render_scene

    image = render_scene(scene, detector.config.image_size)
    result = detector.infer(image)
    write_scene_svg(
        path,
        scene.boxes_array(),
        result.anchors,
        result.boxes,
        result.scores,
        result.count,
        size,
    )
    return result
