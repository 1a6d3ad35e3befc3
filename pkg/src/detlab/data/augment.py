"""Geometric training-time augmentation: large-range scale jitter with
random crop/pad, and mask-based object transplantation between images.

Both augmenters re-derive every bounding box from the transformed visible
mask, so the tight-box invariant survives any geometry they apply.
Annotations whose mask vanishes are dropped (an image may legitimately end
up with no annotations); transplanted objects occlude what they cover, and
an occluded original whose visible area falls below the configured fraction
of its former self is removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .scenes import Annotation, SceneSample, crop_mask, full_mask, mask_bbox

OCCLUSION_KEEP_FRACTION = 0.05


@dataclass(frozen=True)
class LsjPolicy:
    enabled: bool = True
    scale_range: tuple = (0.1, 2.0)

    def validate(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= 1.0 <= hi):
            raise ConfigurationError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")


@dataclass(frozen=True)
class CopyPastePolicy:
    enabled: bool = False
    max_pasted: int = 2
    feather: bool = False  # soft 1-px blend at paste borders (annotation masks stay binary)

    def validate(self):
        if self.max_pasted < 0:
            raise ConfigurationError("max_pasted must be >= 0")


@dataclass(frozen=True)
class AugmentPolicy:
    lsj: LsjPolicy = field(default_factory=LsjPolicy)
    copy_paste: CopyPastePolicy = field(default_factory=CopyPastePolicy)

    def validate(self):
        self.lsj.validate()
        self.copy_paste.validate()

    @staticmethod
    def from_dict(d):
        known = {"lsj", "copy_paste"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown AugmentPolicy keys: {sorted(unknown)}")
        lsj_d = dict(d.get("lsj", {}))
        if "scale_range" in lsj_d:
            lsj_d["scale_range"] = tuple(lsj_d["scale_range"])
        policy = AugmentPolicy(
            lsj=LsjPolicy(**lsj_d), copy_paste=CopyPastePolicy(**d.get("copy_paste", {}))
        )
        policy.validate()
        return policy


def _resize_indices(n_src, n_dst):
    """Source index per destination pixel for nearest-neighbor resize."""
    scale = n_src / n_dst
    idx = np.floor((np.arange(n_dst) + 0.5) * scale).astype(np.int64)
    return np.clip(idx, 0, n_src - 1)


def resize_scene(sample, scale):
    """Nearest-neighbor rescale of image and masks; boxes recomputed."""
    _, h, w = sample.image.shape
    hs, ws = max(1, round(h * scale)), max(1, round(w * scale))
    ri, ci = _resize_indices(h, hs), _resize_indices(w, ws)
    image = sample.image[:, ri][:, :, ci]
    annotations = []
    for a in sample.annotations:
        m = full_mask(a, (h, w))[ri][:, ci]
        bbox = mask_bbox(m)
        if bbox is None:
            continue
        annotations.append(Annotation(a.class_id, bbox, crop_mask(m, bbox), a.annotation_id))
    return SceneSample(image=image, annotations=annotations, image_id=sample.image_id, label=sample.label)


def _place(sample, out_hw, rng):
    """Random crop (if larger) or random-offset pad (if smaller), per axis."""
    _, h, w = sample.image.shape
    ho, wo = out_hw
    image = np.zeros((3, ho, wo), dtype=sample.image.dtype)

    def offsets(n_src, n_dst):
        if n_src >= n_dst:  # crop window start in source
            return int(rng.integers(0, n_src - n_dst + 1)), 0
        return 0, int(rng.integers(0, n_dst - n_src + 1))  # paste offset in dest

    src_y, dst_y = offsets(h, ho)
    src_x, dst_x = offsets(w, wo)
    copy_h, copy_w = min(h, ho), min(w, wo)
    image[:, dst_y : dst_y + copy_h, dst_x : dst_x + copy_w] = sample.image[
        :, src_y : src_y + copy_h, src_x : src_x + copy_w
    ]
    annotations = []
    for a in sample.annotations:
        m = full_mask(a, (h, w))
        placed = np.zeros((ho, wo), dtype=bool)
        placed[dst_y : dst_y + copy_h, dst_x : dst_x + copy_w] = m[
            src_y : src_y + copy_h, src_x : src_x + copy_w
        ]
        bbox = mask_bbox(placed)
        if bbox is None:
            continue
        annotations.append(Annotation(a.class_id, bbox, crop_mask(placed, bbox), a.annotation_id))
    return SceneSample(image=image, annotations=annotations, image_id=sample.image_id, label=sample.label)


def lsj_augment(sample, scale_range, out_size, rng):
    """Scale by s ~ U(scale_range), then random crop/pad to ``out_size``."""
    lo, hi = scale_range
    if not (0.0 < lo <= hi):
        raise ConfigurationError(f"invalid scale_range {scale_range}")
    s = float(rng.uniform(lo, hi))
    return _place(resize_scene(sample, s), out_size, rng)


def copy_paste_augment(target, donor, max_pasted, rng, feather=False):
    """Transplant up to ``max_pasted`` donor objects into the target scene."""
    if max_pasted < 0:
        raise ConfigurationError("max_pasted must be >= 0")
    _, h, w = target.image.shape
    image = target.image.copy()
    existing = [
        {"ann": a, "mask": full_mask(a, (h, w)), "area": a.area} for a in target.annotations
    ]
    pasted = []
    order = rng.permutation(len(donor.annotations))[:max_pasted]
    next_id = (max((a.annotation_id for a in target.annotations), default=target.image_id * 1000)) + 1
    for di in order:
        src = donor.annotations[di]
        x0, y0, bw, bh = src.bbox
        if bw > w or bh > h:
            continue
        nx = int(rng.integers(0, w - bw + 1))
        ny = int(rng.integers(0, h - bh + 1))
        paste_mask = np.zeros((h, w), dtype=bool)
        paste_mask[ny : ny + bh, nx : nx + bw] = src.mask
        patch = donor.image[:, y0 : y0 + bh, x0 : x0 + bw]
        region = image[:, ny : ny + bh, nx : nx + bw]
        if feather:
            alpha = _feather_alpha(src.mask)
            image[:, ny : ny + bh, nx : nx + bw] = alpha * patch + (1.0 - alpha) * region
        else:
            region[:, src.mask] = patch[:, src.mask]
        for rec in existing + pasted:
            rec["mask"] &= ~paste_mask
        pasted.append({"ann": src, "mask": paste_mask, "area": int(paste_mask.sum()), "new_id": next_id})
        next_id += 1
    annotations = []
    for rec in existing + pasted:
        visible = int(rec["mask"].sum())
        if rec["area"] == 0 or visible / rec["area"] < OCCLUSION_KEEP_FRACTION or visible == 0:
            continue
        bbox = mask_bbox(rec["mask"])
        ann_id = rec.get("new_id", rec["ann"].annotation_id)
        annotations.append(Annotation(rec["ann"].class_id, bbox, crop_mask(rec["mask"], bbox), ann_id))
    return SceneSample(image=image, annotations=annotations, image_id=target.image_id, label=target.label)


def _feather_alpha(mask):
    """Soft alpha: 3x3 box blur of the mask, zeroed outside it."""
    m = mask.astype(np.float32)
    padded = np.pad(m, 1)
    acc = np.zeros_like(m)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + m.shape[0], dx : dx + m.shape[1]]
    return np.where(mask, acc / 9.0, 0.0)


def apply_policy(sample, policy, out_size, donor, rng):
    """Apply the configured augmenters with one per-sample stream."""
    out = sample
    if policy.copy_paste.enabled and donor is not None:
        out = copy_paste_augment(out, donor, policy.copy_paste.max_pasted, rng,
                                 feather=policy.copy_paste.feather)
    if policy.lsj.enabled:
        out = lsj_augment(out, policy.lsj.scale_range, out_size, rng)
    return out
