"""Class-wise AP differences along the annotation-count axis, with Gaussian
smoothing. The x axis is the raw training-annotation count (sigma lives in
the same units); each class contributes one raw point and one smoothed
point, where smoothing is a normalized Gaussian-kernel average over all
classes' raw deltas.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from ..errors import ConfigurationError, ContractError


def gaussian_weights(x_query, xs, sigma):
    """Normalized kernel weights of each class at one query point."""
    xs = np.asarray(xs, dtype=np.float64)
    w = np.exp(-((x_query - xs) ** 2) / (2.0 * sigma * sigma))
    total = w.sum()
    if total <= 0:
        raise ContractError("kernel weights vanished; sigma too small for the count spread")
    return w / total


def classwise_relative_curve(report_a, report_b, annotation_counts, sigma=1000.0):
    """Per-class AP delta (a - b) vs training annotation count, raw and smoothed.

    Both reports must cover the same class set. Returns rows of
    (class_id, annotations, delta_raw, delta_smoothed) sorted by count then
    class id.
    """
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    classes_a = set(report_a.per_class_ap)
    classes_b = set(report_b.per_class_ap)
    if classes_a != classes_b:
        raise ConfigurationError(
            f"reports cover different class sets: {sorted(classes_a ^ classes_b)} differ"
        )
    missing = [c for c in classes_a if c not in annotation_counts]
    if missing:
        raise ConfigurationError(f"annotation_counts missing classes {sorted(missing)}")
    classes = sorted(classes_a)
    xs = np.asarray([annotation_counts[c] for c in classes], dtype=np.float64)
    deltas = np.asarray(
        [report_a.per_class_ap[c] - report_b.per_class_ap[c] for c in classes], dtype=np.float64
    )
    rows = []
    for i, c in enumerate(classes):
        w = gaussian_weights(xs[i], xs, sigma)
        smoothed = math.fsum(w * deltas)
        rows.append((c, float(xs[i]), float(deltas[i]), float(smoothed)))
    rows.sort(key=lambda r: (r[1], r[0]))
    return rows


def write_curve_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "annotations", "delta_raw", "delta_smoothed"])
        writer.writerows(rows)
