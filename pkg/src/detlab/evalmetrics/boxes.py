"""IoU and non-maximum suppression on (x, y, w, h) boxes.

The greedy NMS order is fully deterministic: detections are visited by
descending score with ties broken by ascending box coordinates, and a box
is suppressed when its IoU with an already-kept box of the same class
strictly exceeds the threshold.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


def iou(a, b):
    """IoU of two (x, y, w, h) boxes; symmetric, in [0, 1]."""
    ax, ay, aw, ah = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx, by, bw, bh = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ContractError(f"iou needs positive extents, got {a} and {b}")
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def _nms_order(scores, boxes):
    keys = list(zip(-np.asarray(scores, dtype=np.float64), *np.asarray(boxes, dtype=np.float64).T))
    return sorted(range(len(keys)), key=lambda i: keys[i])


def nms_xyxy(boxes, scores, threshold):
    """Class-agnostic greedy NMS on xyxy boxes; returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = _nms_order(scores, boxes)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    kept = []
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        lt = np.maximum(boxes[i, :2], boxes[:, :2])
        rb = np.minimum(boxes[i, 2:], boxes[:, 2:])
        wh = np.clip(rb - lt, 0.0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas - inter
        ious = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
        suppressed |= ious > threshold
    return np.asarray(kept, dtype=np.int64)


def nms(detections, iou_threshold):
    """Greedy per-class NMS over a list of detection dicts.

    Each detection is {"bbox": (x, y, w, h), "score": float, "category_id": int};
    the surviving detections are returned in kept (score-descending) order.
    """
    if not detections:
        return []
    if not all(np.isfinite(d["score"]) for d in detections):
        raise ContractError("nms requires finite scores")
    boxes = np.asarray([d["bbox"] for d in detections], dtype=np.float64)
    xyxy = boxes.copy()
    xyxy[:, 2] = boxes[:, 0] + boxes[:, 2]
    xyxy[:, 3] = boxes[:, 1] + boxes[:, 3]
    scores = np.asarray([d["score"] for d in detections], dtype=np.float64)
    classes = np.asarray([d["category_id"] for d in detections])
    kept = []
    for c in sorted(set(classes.tolist())):
        idx = np.flatnonzero(classes == c)
        for k in nms_xyxy(xyxy[idx], scores[idx], iou_threshold):
            kept.append(idx[k])
    kept.sort(key=lambda i: (-scores[i], *boxes[i]))
    return [detections[i] for i in kept]
