"""Anchor grids, box delta coding, and IoU matrices.

Boxes here are float (x1, y1, x2, y2) arrays in image pixels; conversion to
the (x, y, w, h) wire convention happens at dataset / report boundaries.
Anchor order within a level is (row, col, anchor), matching the layout the
heads emit after transposing their [N, A*k, H, W] conv outputs.
"""

from __future__ import annotations

import numpy as np

DELTA_CLAMP = float(np.log(16.0))


def level_anchors(feat_h, feat_w, stride, config):
    """[H*W*A, 4] anchors for one pyramid level."""
    base = config.base_scale * stride
    sizes = []
    for scale in config.scales:
        for ratio in config.aspect_ratios:
            area = (base * scale) ** 2
            w = np.sqrt(area * ratio)
            sizes.append((w, area / w))
    sizes = np.asarray(sizes, dtype=np.float64)  # [A, 2]
    cy, cx = np.mgrid[0:feat_h, 0:feat_w].astype(np.float64) + 0.5
    cx = cx * stride
    cy = cy * stride
    centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)  # [HW, 1, 2]
    half = sizes[None, :, :] / 2.0  # [1, A, 2]
    x1y1 = centers - half
    x2y2 = centers + half
    return np.concatenate([x1y1, x2y2], axis=-1).reshape(-1, 4).astype(np.float32)


def pyramid_anchors(feat_shapes, strides, config):
    """Per-level anchor arrays for the given (H, W) feature shapes."""
    return [
        level_anchors(h, w, s, config)
        for (h, w), s in zip(feat_shapes, strides)
    ]


def iou_matrix(a, b):
    """Pairwise IoU of xyxy boxes: [len(a), len(b)]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(ref, gt):
    """Deltas that map reference boxes onto ground-truth boxes."""
    ref = np.asarray(ref, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    rw = np.maximum(rw, 1e-6)
    rh = np.maximum(rh, 1e-6)
    return np.stack(
        [(gx - rx) / rw, (gy - ry) / rh, np.log(np.maximum(gw, 1e-6) / rw), np.log(np.maximum(gh, 1e-6) / rh)],
        axis=1,
    ).astype(np.float32)


def decode_boxes(ref, deltas, clip_hw=None):
    """Apply deltas to reference boxes; optionally clip to (H, W)."""
    ref = np.asarray(ref, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy, dw, dh = deltas[:, 0], deltas[:, 1], deltas[:, 2], deltas[:, 3]
    dw = np.clip(dw, -DELTA_CLAMP, DELTA_CLAMP)
    dh = np.clip(dh, -DELTA_CLAMP, DELTA_CLAMP)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * np.exp(dw)
    h = rh * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip_hw is not None:
        # a diverging model can emit NaN deltas; collapse those boxes to empty
        # so they are filtered geometrically and the loss guard reports the
        # divergence instead of an index crash
        out = np.where(np.isfinite(out), out, 0.0)
        hh, ww = clip_hw
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, ww)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, hh)
    return out.astype(np.float32)


def xywh_to_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    out = b.copy()
    out[..., 2] = b[..., 0] + b[..., 2]
    out[..., 3] = b[..., 1] + b[..., 3]
    return out


def xyxy_to_xywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    out = b.copy()
    out[..., 2] = b[..., 2] - b[..., 0]
    out[..., 3] = b[..., 3] - b[..., 1]
    return out
