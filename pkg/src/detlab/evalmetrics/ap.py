"""COCO-protocol average precision with frequency and size strata.

Matching protocol (fixed, fully deterministic; the exhaustive reference in
the test suite implements the same rules independently):

1. Within an image, detections of a class are visited by descending score,
   ties broken by ascending (x, y, w, h).
2. A detection greedily claims the unclaimed ground-truth box with the
   highest IoU >= threshold; equal IoU keeps the earlier box. When an area
   range is active, out-of-range ground truth is "ignored": it is scanned
   after all in-range boxes, a detection matched to it counts neither as
   true nor false positive, and unmatched detections whose own area falls
   outside the range are likewise dropped from scoring.
3. Scored detections pool across images ordered by (-score, image_id,
   x, y, w, h); precision is interpolated on the 101-point recall grid
   {0.00, 0.01, ..., 1.00}.

All final reductions use math.fsum, so results are reproducible bit for bit
regardless of vectorization. Values live in [0, 1]; rendering x100 happens
at the reporting boundary. A class with zero (non-ignored) ground truth has
undefined AP and is excluded from every mean it would enter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ContractError
from .boxes import nms  # noqa: F401  (re-exported next to the AP entry points)

RECALL_GRID = [r / 100.0 for r in range(101)]


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2).tolist())
    max_dets_per_image: int = 100
    size_bins: tuple = ((0.0, 32.0**2), (32.0**2, 96.0**2), (96.0**2, float("inf")))
    frequency_bins: tuple = ((1, 10), (11, 100), (101, float("inf")))

    def validate(self):
        ts = self.iou_thresholds
        if any(not (0.0 < t < 1.0) for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError(f"iou_thresholds must be strictly increasing in (0, 1), got {ts}")
        if self.max_dets_per_image < 1:
            raise ConfigurationError("max_dets_per_image must be >= 1")
        for bins, name in ((self.size_bins, "size_bins"), (self.frequency_bins, "frequency_bins")):
            for (a0, a1), (b0, b1) in zip(bins, bins[1:]):
                if a1 > b0:
                    raise ConfigurationError(f"{name} must partition their domain, got {bins}")


@dataclass
class EvalReport:
    map: float = 0.0
    ap50: float = 0.0
    per_class_ap: dict = field(default_factory=dict)
    map_rare: float | None = None
    map_common: float | None = None
    map_frequent: float | None = None
    map_small: float | None = None
    map_medium: float | None = None
    map_large: float | None = None
    per_class_ap_by_size: list = field(default_factory=list)
    class_gt_counts: dict = field(default_factory=dict)
    class_train_image_counts: dict = field(default_factory=dict)
    n_images: int = 0

    def to_dict(self):
        return {
            "mAP": self.map,
            "AP50": self.ap50,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mAP_r": self.map_rare,
            "mAP_c": self.map_common,
            "mAP_f": self.map_frequent,
            "mAP_s": self.map_small,
            "mAP_m": self.map_medium,
            "mAP_l": self.map_large,
            "per_class_ap_by_size": [
                {str(k): v for k, v in d.items()} for d in self.per_class_ap_by_size
            ],
            "class_gt_counts": {str(k): v for k, v in self.class_gt_counts.items()},
            "class_train_image_counts": {str(k): v for k, v in self.class_train_image_counts.items()},
            "n_images": self.n_images,
        }

    @staticmethod
    def from_dict(d):
        return EvalReport(
            map=d["mAP"],
            ap50=d["AP50"],
            per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
            map_rare=d.get("mAP_r"),
            map_common=d.get("mAP_c"),
            map_frequent=d.get("mAP_f"),
            map_small=d.get("mAP_s"),
            map_medium=d.get("mAP_m"),
            map_large=d.get("mAP_l"),
            per_class_ap_by_size=[
                {int(k): v for k, v in s.items()} for s in d.get("per_class_ap_by_size", [])
            ],
            class_gt_counts={int(k): v for k, v in d.get("class_gt_counts", {}).items()},
            class_train_image_counts={
                int(k): v for k, v in d.get("class_train_image_counts", {}).items()
            },
            n_images=d.get("n_images", 0),
        )


def _det_sort_key(d):
    x, y, w, h = d["bbox"]
    return (-d["score"], x, y, w, h)


def _cap_per_image(detections, max_dets):
    by_image = {}
    for d in detections:
        by_image.setdefault(d["image_id"], []).append(d)
    capped = []
    for img in by_image.values():
        img.sort(key=_det_sort_key)
        capped.extend(img[:max_dets])
    return capped


def _box_area(bbox):
    return float(bbox[2]) * float(bbox[3])


def _match_image(dets, gts, threshold, area_range):
    """Match one (image, class) cell; returns scored rows and #counted gt.

    Each row is (score, tp_flag); ignored detections produce no row.
    """
    if area_range is None:
        gt_order = list(range(len(gts)))
        gt_ignored = [False] * len(gts)
    else:
        lo, hi = area_range
        gt_ignored = [not (lo < _box_area(g["bbox"]) <= hi) for g in gts]
        gt_order = sorted(range(len(gts)), key=lambda i: gt_ignored[i])
    claimed = [False] * len(gts)
    rows = []
    for d in sorted(dets, key=_det_sort_key):
        best, best_iou = -1, threshold
        for gi in gt_order:
            if claimed[gi]:
                continue
            if best >= 0 and not gt_ignored[best] and gt_ignored[gi]:
                break
            v = _iou_xywh(d["bbox"], gts[gi]["bbox"])
            if v < best_iou:
                continue
            if v > best_iou or best < 0:
                best, best_iou = gi, v
        if best >= 0:
            claimed[best] = True
            if not gt_ignored[best]:
                rows.append((d, True))
        else:
            if area_range is not None:
                lo, hi = area_range
                if not (lo < _box_area(d["bbox"]) <= hi):
                    continue
            rows.append((d, False))
    n_gt = sum(1 for ig in gt_ignored if not ig)
    return rows, n_gt


def _iou_xywh(a, b):
    ax, ay, aw, ah = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx, by, bw, bh = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def interpolated_ap(scored_rows, n_gt):
    """101-point interpolated AP from globally ordered (row, tp) pairs."""
    if n_gt == 0:
        return None
    if not scored_rows:
        return 0.0
    tp = fp = 0
    recalls, precisions = [], []
    for _, is_tp in scored_rows:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    running = [0.0] * len(precisions)
    acc = 0.0
    for i in range(len(precisions) - 1, -1, -1):
        acc = max(acc, precisions[i])
        running[i] = acc
    vals = []
    for g in RECALL_GRID:
        i = _first_at_least(recalls, g)
        vals.append(running[i] if i < len(recalls) else 0.0)
    return math.fsum(vals) / 101.0


def _first_at_least(sorted_vals, g):
    lo, hi = 0, len(sorted_vals)
    while lo < hi:
        mid = (lo + hi) // 2
        if sorted_vals[mid] >= g:
            hi = mid
        else:
            lo = mid + 1
    return lo


def average_precision(detections, ground_truth, iou_threshold, area_range=None):
    """AP for one class: detections/ground_truth are per-image dict lists.

    Detections must already be score-sorted within images (the function
    re-sorts defensively with the deterministic tie-break). Returns None
    when the class has no ground truth to count.
    """
    image_ids = sorted(set(ground_truth) | set(detections))
    pooled, n_gt = [], 0
    for img in image_ids:
        rows, n = _match_image(detections.get(img, []), ground_truth.get(img, []), iou_threshold, area_range)
        pooled.extend((row[0], row[1], img) for row in rows)
        n_gt += n
    pooled.sort(key=lambda r: (-r[0]["score"], r[2], *r[0]["bbox"]))
    return interpolated_ap([(r[0], r[1]) for r in pooled], n_gt)


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return math.fsum(vals) / len(vals)


def compute_report(detections, gt_annotations, config=None, train_image_counts=None):
    """Full stratified evaluation.

    ``detections``: list of {image_id, category_id, bbox(x, y, w, h), score}.
    ``gt_annotations``: dict with "images" (list of image ids) and
    "annotations" (list of {image_id, category_id, bbox}).
    ``train_image_counts``: class -> number of distinct training images
    containing the class; enables the frequency strata when given.
    """
    config = config or EvalConfig()
    config.validate()
    image_ids = list(gt_annotations["images"])
    if not image_ids:
        raise ContractError("cannot evaluate an empty dataset")
    detections = _cap_per_image(detections, config.max_dets_per_image)

    classes = sorted({a["category_id"] for a in gt_annotations["annotations"]})
    gt_by_class = {c: {} for c in classes}
    for a in gt_annotations["annotations"]:
        gt_by_class[a["category_id"]].setdefault(a["image_id"], []).append(a)
    det_by_class = {c: {} for c in classes}
    for d in detections:
        if d["category_id"] in det_by_class:
            det_by_class[d["category_id"]].setdefault(d["image_id"], []).append(d)

    report = EvalReport(n_images=len(image_ids))
    report.class_gt_counts = {c: sum(len(v) for v in gt_by_class[c].values()) for c in classes}

    ap_table = {}  # class -> list over thresholds
    ap50 = {}
    for c in classes:
        aps = [
            average_precision(det_by_class[c], gt_by_class[c], t)
            for t in config.iou_thresholds
        ]
        ap_table[c] = aps
        if 0.5 in config.iou_thresholds:
            ap50[c] = aps[config.iou_thresholds.index(0.5)]
    report.per_class_ap = {c: _mean(ap_table[c]) for c in classes}
    report.map = _mean(report.per_class_ap.values())
    report.ap50 = _mean(ap50.values())

    size_means = []
    for bin_range in config.size_bins:
        by_class = {}
        for c in classes:
            aps = [
                average_precision(det_by_class[c], gt_by_class[c], t, area_range=bin_range)
                for t in config.iou_thresholds
            ]
            mean_c = _mean(aps) if any(a is not None for a in aps) else None
            if mean_c is not None:
                by_class[c] = mean_c
        report.per_class_ap_by_size.append(by_class)
        size_means.append(_mean(by_class.values()))
    report.map_small, report.map_medium, report.map_large = size_means

    if train_image_counts is not None:
        report.class_train_image_counts = dict(train_image_counts)
        freq_means = []
        for lo, hi in config.frequency_bins:
            in_bin = [
                report.per_class_ap[c]
                for c in classes
                if lo <= train_image_counts.get(c, 0) <= hi
            ]
            freq_means.append(_mean(in_bin))
        report.map_rare, report.map_common, report.map_frequent = freq_means
    return report
