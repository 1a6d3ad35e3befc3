"""Parametric shape classes and their rasterization.

A class is a (shape family, hue band, size range, appearance range) bundle;
catalogs are built so that a small catalog's classes are a strict subset of
the large one's (same ids, same generators), which is what lets models
pretrained on either catalog be probed on shared classes.

Rasterization is analytic: every family is a boolean predicate over the
pixel grid, so masks are exact and bounding boxes derived from them are
tight by construction.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError

FAMILIES = (
    "disk",
    "ring",
    "square",
    "bar",
    "cross",
    "triangle",
    "ellipse",
    "diamond",
    "hexagram",
    "checker_disk",
)


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    family: str
    hue_center: float
    hue_width: float
    size_range: tuple  # (min, max) half-extent in pixels
    rotation_jitter: float  # radians
    stripe_prob: float

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["size_range"] = tuple(d["size_range"])
        return ShapeClass(**d)


def build_catalog(n_classes, size_range=(4.0, 11.0), appearance="narrow"):
    """Catalog of (family x hue band) classes.

    ``appearance`` widens per-class variation: "wide" doubles the rotation
    jitter, broadens hue bands, and enables stripe textures. Class i always
    means (family i % 10, hue band i // 10) so catalogs of different sizes
    share their common prefix.
    """
    if n_classes < 2:
        raise ConfigurationError("a catalog needs at least 2 classes")
    if appearance not in ("narrow", "wide"):
        raise ConfigurationError(f"unknown appearance {appearance!r}")
    wide = appearance == "wide"
    n_bands = (n_classes + len(FAMILIES) - 1) // len(FAMILIES)
    classes = []
    for i in range(n_classes):
        family = FAMILIES[i % len(FAMILIES)]
        band = i // len(FAMILIES)
        hue = (band / max(1, n_bands)) % 1.0 if n_bands > 1 else 0.02
        classes.append(
            ShapeClass(
                class_id=i,
                family=family,
                hue_center=hue,
                hue_width=0.10 if wide else 0.05,
                size_range=tuple(size_range),
                rotation_jitter=0.6 if wide else 0.25,
                stripe_prob=0.35 if wide else 0.0,
            )
        )
    return classes


def _rotated_coords(h, w, cx, cy, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    c, s = np.cos(theta), np.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def family_mask(family, h, w, cx, cy, a, theta):
    """Boolean raster of one shape instance with half-extent ``a``."""
    u, v = _rotated_coords(h, w, cx, cy, theta)
    if family == "disk":
        return u * u + v * v <= a * a
    if family == "ring":
        d2 = u * u + v * v
        return (d2 <= a * a) & (d2 >= (0.55 * a) ** 2)
    if family == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= a * 0.9
    if family == "bar":
        return (np.abs(u) <= a) & (np.abs(v) <= 0.35 * a)
    if family == "cross":
        horiz = (np.abs(u) <= a) & (np.abs(v) <= 0.3 * a)
        vert = (np.abs(v) <= a) & (np.abs(u) <= 0.3 * a)
        return horiz | vert
    if family == "triangle":
        return _triangle(u, v, a, up=True)
    if family == "ellipse":
        return (u / a) ** 2 + (v / (0.5 * a)) ** 2 <= 1.0
    if family == "diamond":
        return np.abs(u) + np.abs(v) <= a * 1.1
    if family == "hexagram":
        return _triangle(u, v, a, up=True) | _triangle(u, v, a, up=False)
    if family == "checker_disk":
        disk = u * u + v * v <= a * a
        tile = max(2.0, a * 0.7)
        checker = ((np.floor(u / tile) + np.floor(v / tile)) % 2) == 0
        return disk & checker
    raise ConfigurationError(f"unknown shape family {family!r}")


def _triangle(u, v, a, up=True):
    vv = v if up else -v
    top = vv <= a
    left = vv >= np.sqrt(3.0) * u - a * 0.9
    right = vv >= -np.sqrt(3.0) * u - a * 0.9
    return top & left & right


def sample_instance(shape_class, rng, canvas_hw, scale=1.0, center=None):
    """Draw parameters for one instance; returns (mask, rgb color).

    ``scale`` multiplies the class size range (classification renders
    larger single objects than detection scenes).
    """
    h, w = canvas_hw
    lo, hi = shape_class.size_range
    a = rng.uniform(lo, hi) * scale
    if center is None:
        margin = a * 1.3 + 1
        cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
        cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
    else:
        cx, cy = center
    theta = rng.uniform(-shape_class.rotation_jitter, shape_class.rotation_jitter)
    mask = family_mask(shape_class.family, h, w, cx, cy, a, theta)
    hue = (shape_class.hue_center + rng.uniform(-0.5, 0.5) * shape_class.hue_width) % 1.0
    sat = rng.uniform(0.55, 0.95)
    val = rng.uniform(0.55, 0.95)
    rgb = np.asarray(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)
    if shape_class.stripe_prob > 0 and rng.random() < shape_class.stripe_prob:
        u, _ = _rotated_coords(h, w, cx, cy, theta + rng.uniform(0, np.pi))
        stripes = np.sin(u * (2 * np.pi / rng.uniform(3.0, 6.0))) > 0
        mask_img = np.where(stripes, 1.0, 0.55)
        return mask, rgb, mask_img
    return mask, rgb, None
