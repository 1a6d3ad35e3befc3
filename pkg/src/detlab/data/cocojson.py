"""COCO-style annotation file ingestion and emission.

Reading validates the three required arrays and their required fields,
rejects malformed boxes (logged and tallied, never fatal), and drops crowd
regions with a log line. Record dicts are kept as parsed, so unknown fields
ride through a read-then-write round trip untouched; writing re-emits the
consumed structure plus any preserved extras.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ParseError

log = logging.getLogger(__name__)

REQUIRED_IMAGE_FIELDS = ("id", "file_name", "width", "height")
REQUIRED_ANNOTATION_FIELDS = ("id", "image_id", "category_id", "bbox", "area", "iscrowd")
REQUIRED_CATEGORY_FIELDS = ("id", "name")


@dataclass
class CocoManifest:
    images: list
    annotations: list
    categories: list
    extra: dict = field(default_factory=dict)  # unknown top-level fields, preserved opaquely
    rejected: dict = field(default_factory=lambda: {"bad_bbox": 0, "crowd": 0})

    def category_ids(self):
        return [c["id"] for c in self.categories]

    def per_class_annotation_counts(self):
        counts = {c["id"]: 0 for c in self.categories}
        for a in self.annotations:
            counts[a["category_id"]] = counts.get(a["category_id"], 0) + 1
        return counts

    def per_class_image_counts(self):
        per_class = {c["id"]: set() for c in self.categories}
        for a in self.annotations:
            per_class.setdefault(a["category_id"], set()).add(a["image_id"])
        return {k: len(v) for k, v in per_class.items()}

    def to_eval_gt(self):
        return {
            "images": [im["id"] for im in self.images],
            "annotations": [
                {"image_id": a["image_id"], "category_id": a["category_id"], "bbox": tuple(a["bbox"])}
                for a in self.annotations
            ],
        }


def _require(record, fields, array_name, index):
    for f in fields:
        if f not in record:
            raise ParseError(f"{array_name}[{index}] is missing required field {f!r}")


def read_coco_json(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e
    for array in ("images", "annotations", "categories"):
        if array not in raw or not isinstance(raw[array], list):
            raise ParseError(f"{path} is missing the {array!r} array")

    for i, im in enumerate(raw["images"]):
        _require(im, REQUIRED_IMAGE_FIELDS, "images", i)
    for i, c in enumerate(raw["categories"]):
        _require(c, REQUIRED_CATEGORY_FIELDS, "categories", i)

    annotations = []
    rejected = {"bad_bbox": 0, "crowd": 0}
    for i, a in enumerate(raw["annotations"]):
        _require(a, REQUIRED_ANNOTATION_FIELDS, "annotations", i)
        x, y, w, h = a["bbox"]
        if w <= 0 or h <= 0:
            rejected["bad_bbox"] += 1
            log.warning("annotations[%d] (id=%s) rejected: non-positive bbox extent %s", i, a["id"], a["bbox"])
            continue
        if a["iscrowd"]:
            rejected["crowd"] += 1
            log.warning("annotations[%d] (id=%s) dropped: crowd regions are unsupported", i, a["id"])
            continue
        annotations.append(a)

    extra = {k: v for k, v in raw.items() if k not in ("images", "annotations", "categories")}
    return CocoManifest(
        images=list(raw["images"]),
        annotations=annotations,
        categories=list(raw["categories"]),
        extra=extra,
        rejected=rejected,
    )


def write_coco_json(manifest, path):
    payload = dict(manifest.extra)
    payload["images"] = manifest.images
    payload["annotations"] = manifest.annotations
    payload["categories"] = manifest.categories
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def dataset_to_coco(dataset):
    """Express a synthetic dataset in the COCO annotation structure."""
    images = [
        {
            "id": s.image_id,
            "file_name": f"img_{s.image_id:06d}.bin",
            "width": dataset.canvas[1],
            "height": dataset.canvas[0],
        }
        for s in dataset.samples
    ]
    annotations = []
    for s in dataset.samples:
        for a in s.annotations:
            annotations.append(
                {
                    "id": a.annotation_id,
                    "image_id": s.image_id,
                    "category_id": a.class_id,
                    "bbox": [float(v) for v in a.bbox],
                    "area": float(a.area),
                    "iscrowd": 0,
                }
            )
    categories = [{"id": c.class_id, "name": f"{c.family}_{c.class_id}"} for c in dataset.classes]
    return CocoManifest(images=images, annotations=annotations, categories=categories)


def write_detections_json(detections, path):
    """COCO results format: a JSON array of detection dicts."""
    rows = [
        {
            "image_id": int(d["image_id"]),
            "category_id": int(d["category_id"]),
            "bbox": [float(v) for v in d["bbox"]],
            "score": float(d["score"]),
        }
        for d in detections
    ]
    Path(path).write_text(json.dumps(rows))


def read_detections_json(path):
    rows = json.loads(Path(path).read_text())
    if not isinstance(rows, list):
        raise ParseError(f"{path}: detections file must be a JSON array")
    for i, d in enumerate(rows):
        for f in ("image_id", "category_id", "bbox", "score"):
            if f not in d:
                raise ParseError(f"detections[{i}] is missing required field {f!r}")
    return rows
