"""Exhaustive reference evaluator used as the oracle for the fast path.

Implements the documented matching protocol with nothing but explicit
loops over detections, ground truth, images, classes, and thresholds:

- per (image, class): visit detections by descending score (ties by
  ascending x, y, w, h); each claims the unclaimed ground-truth box with
  the highest IoU >= threshold, earlier box on equal IoU; with an area
  range, out-of-range ground truth is scanned last and never scores, and
  unmatched detections outside the range are dropped;
- pool scored detections over images by (-score, image_id, x, y, w, h);
- 101-point interpolated AP; means via math.fsum; a class with zero
  counted ground truth is excluded from every mean.

The implementation shares no code with the production path beyond the
Python standard library.
"""

import math


def iou_ref(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def _in_range(bbox, area_range):
    if area_range is None:
        return True
    lo, hi = area_range
    area = bbox[2] * bbox[3]
    return lo < area <= hi


def match_one_image(dets, gts, threshold, area_range):
    """Returns ([(det, is_tp)], n_counted_gt) for one image and class."""
    det_order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i]["score"], dets[i]["bbox"][0], dets[i]["bbox"][1],
                       dets[i]["bbox"][2], dets[i]["bbox"][3]),
    )
    ignored = [area_range is not None and not _in_range(g["bbox"], area_range) for g in gts]
    gt_order = sorted(range(len(gts)), key=lambda i: ignored[i])
    taken = [False] * len(gts)
    rows = []
    for di in det_order:
        d = dets[di]
        best = -1
        best_iou = threshold
        for gi in gt_order:
            if taken[gi]:
                continue
            if best >= 0 and not ignored[best] and ignored[gi]:
                break
            v = iou_ref(d["bbox"], gts[gi]["bbox"])
            if v < best_iou:
                continue
            if v > best_iou or best < 0:
                best = gi
                best_iou = v
        if best >= 0:
            taken[best] = True
            if not ignored[best]:
                rows.append((d, True))
        elif area_range is None or _in_range(d["bbox"], area_range):
            rows.append((d, False))
    n_gt = sum(1 for flag in ignored if not flag)
    return rows, n_gt


def ap_for_class(dets_by_img, gts_by_img, threshold, area_range=None):
    image_ids = sorted(set(gts_by_img) | set(dets_by_img))
    pooled = []
    n_gt = 0
    for img in image_ids:
        rows, n = match_one_image(dets_by_img.get(img, []), gts_by_img.get(img, []), threshold, area_range)
        n_gt += n
        for d, tp in rows:
            pooled.append((d, tp, img))
    if n_gt == 0:
        return None
    pooled.sort(key=lambda r: (-r[0]["score"], r[2], r[0]["bbox"][0], r[0]["bbox"][1],
                               r[0]["bbox"][2], r[0]["bbox"][3]))
    tp = fp = 0
    recalls, precisions = [], []
    for _, is_tp, _ in pooled:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    vals = []
    for k in range(101):
        g = k / 100.0
        best = 0.0
        for r, p in zip(recalls, precisions):
            if r >= g and p > best:
                best = p
        vals.append(best)
    return math.fsum(vals) / 101.0


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def reference_report(detections, gt, thresholds, max_dets, size_bins, freq_bins=None,
                     train_image_counts=None):
    """Full reference evaluation mirroring the production report fields."""
    capped = []
    by_img = {}
    for d in detections:
        by_img.setdefault(d["image_id"], []).append(d)
    for img, ds in by_img.items():
        ds = sorted(ds, key=lambda d: (-d["score"], d["bbox"][0], d["bbox"][1], d["bbox"][2], d["bbox"][3]))
        capped.extend(ds[:max_dets])

    classes = sorted({a["category_id"] for a in gt["annotations"]})
    gt_by = {c: {} for c in classes}
    for a in gt["annotations"]:
        gt_by[a["category_id"]].setdefault(a["image_id"], []).append(a)
    det_by = {c: {} for c in classes}
    for d in capped:
        if d["category_id"] in det_by:
            det_by[d["category_id"]].setdefault(d["image_id"], []).append(d)

    per_class = {}
    ap50 = {}
    for c in classes:
        aps = [ap_for_class(det_by[c], gt_by[c], t) for t in thresholds]
        per_class[c] = _mean(aps)
        idx50 = thresholds.index(0.5) if 0.5 in thresholds else None
        if idx50 is not None:
            ap50[c] = aps[idx50]

    by_size = []
    for rng in size_bins:
        vals = {}
        for c in classes:
            aps = [ap_for_class(det_by[c], gt_by[c], t, area_range=rng) for t in thresholds]
            m = _mean(aps)
            if m is not None:
                vals[c] = m
        by_size.append(vals)

    out = {
        "mAP": _mean(per_class.values()),
        "AP50": _mean(ap50.values()),
        "per_class_ap": per_class,
        "by_size": [_mean(v.values()) for v in by_size],
        "per_class_by_size": by_size,
    }
    if train_image_counts is not None and freq_bins is not None:
        freq = []
        for lo, hi in freq_bins:
            freq.append(_mean([per_class[c] for c in classes if lo <= train_image_counts.get(c, 0) <= hi]))
        out["by_freq"] = freq
    return out


def random_tiny_instance(rng, max_images=5, max_boxes=6, max_classes=3, canvas=40):
    """One randomized evaluation instance with small discrete geometry.

    Integer-ish coordinates make IoU ties and exact-threshold hits common,
    which is exactly where matching implementations disagree.
    """
    n_images = int(rng.integers(1, max_images + 1))
    image_ids = list(range(1, n_images + 1))
    gts = []
    dets = []
    for img in image_ids:
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            w = int(rng.integers(1, 12))
            h = int(rng.integers(1, 12))
            x = int(rng.integers(0, canvas - w))
            y = int(rng.integers(0, canvas - h))
            gts.append(
                {"image_id": img, "category_id": int(rng.integers(0, max_classes)),
                 "bbox": (float(x), float(y), float(w), float(h))}
            )
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if gts and rng.random() < 0.6:  # perturb an existing gt box
                g = gts[int(rng.integers(0, len(gts)))]
                bx, by, bw, bh = g["bbox"]
                x = max(0.0, bx + float(rng.integers(-2, 3)))
                y = max(0.0, by + float(rng.integers(-2, 3)))
                w = max(1.0, bw + float(rng.integers(-2, 3)))
                h = max(1.0, bh + float(rng.integers(-2, 3)))
                cat = g["category_id"] if rng.random() < 0.8 else int(rng.integers(0, max_classes))
            else:
                w = float(rng.integers(1, 12))
                h = float(rng.integers(1, 12))
                x = float(rng.integers(0, canvas - int(w)))
                y = float(rng.integers(0, canvas - int(h)))
                cat = int(rng.integers(0, max_classes))
            score = float(rng.choice([0.1, 0.25, 0.25, 0.5, 0.7, 0.7, 0.9]))
            dets.append(
                {"image_id": img, "category_id": cat, "bbox": (x, y, w, h), "score": score}
            )
    gt = {"images": image_ids, "annotations": gts}
    counts = {}
    for g in gts:
        counts.setdefault(g["category_id"], set()).add(g["image_id"])
    return dets, gt, {c: len(v) for c, v in counts.items()}
