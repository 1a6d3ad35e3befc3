"""Scene synthesis and dataset containers.

Generation is pure per (spec, seed, image index): every image draws from
its own keyed stream, so datasets are reproducible byte for byte and safe
to build in parallel. Detection scenes may occlude earlier objects; an
annotation always carries the visible mask, cropped to its tight box.

Storage layout (store/load): `manifest.json` with all metadata and
annotations, `images.bin` with packed little-endian float32 planes plus
`index.json` mapping image ids to offsets, and `masks.bin` for the packed
uint8 annotation masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, DataError
from ..rng import stream
from .catalog import ShapeClass, build_catalog, sample_instance

MIN_VISIBLE_PIXELS = 4


@dataclass
class Annotation:
    class_id: int
    bbox: tuple  # (x, y, w, h) integer pixels
    mask: np.ndarray  # bool [h, w], cropped to bbox, tight by construction
    annotation_id: int

    @property
    def area(self):
        return int(self.mask.sum())


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    annotations: list
    image_id: int
    label: int | None = None  # classification sets only


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (64, 64)
    n_classes: int = 12
    size_range: tuple = (4.0, 11.0)
    appearance: str = "narrow"
    frequency: str = "uniform"  # "uniform" | "power_law"
    power_law_exponent: float = 1.5
    objects_per_image: tuple = (2, 5)
    occlusion_allowed: bool = True
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.frequency not in ("uniform", "power_law"):
            raise ConfigurationError(f"unknown frequency mode {self.frequency!r}")
        if self.frequency == "power_law" and self.power_law_exponent <= 0:
            raise ConfigurationError("power_law exponent must be > 0")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"invalid objects_per_image range {self.objects_per_image}")

    def class_probs(self):
        if self.frequency == "uniform":
            return np.full(self.n_classes, 1.0 / self.n_classes)
        ranks = np.arange(1, self.n_classes + 1, dtype=np.float64)
        p = ranks ** (-self.power_law_exponent)
        return p / p.sum()


@dataclass
class Dataset:
    dataset_id: str
    kind: str  # "detection" | "classification"
    canvas: tuple
    classes: list  # ShapeClass entries
    samples: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def n_classes(self):
        return len(self.classes)

    def class_annotation_counts(self):
        counts = {c.class_id: 0 for c in self.classes}
        for s in self.samples:
            if s.label is not None:
                counts[s.label] += 1
            for a in s.annotations:
                counts[a.class_id] += 1
        return counts

    def class_image_counts(self):
        counts = {c.class_id: 0 for c in self.classes}
        for s in self.samples:
            present = {a.class_id for a in s.annotations}
            if s.label is not None:
                present.add(s.label)
            for c in present:
                counts[c] += 1
        return counts

    def to_eval_gt(self):
        """Ground truth in the shape compute_report consumes."""
        annotations = []
        for s in self.samples:
            for a in s.annotations:
                annotations.append(
                    {"image_id": s.image_id, "category_id": a.class_id, "bbox": tuple(float(v) for v in a.bbox)}
                )
        return {"images": [s.image_id for s in self.samples], "annotations": annotations}

    def manifest_dict(self):
        return {
            "dataset_id": self.dataset_id,
            "kind": self.kind,
            "canvas": list(self.canvas),
            "seed": self.seed,
            "spec": self.spec,
            "classes": [c.to_dict() for c in self.classes],
            "per_class_annotation_counts": {str(k): v for k, v in self.class_annotation_counts().items()},
            "per_class_image_counts": {str(k): v for k, v in self.class_image_counts().items()},
            "n_images": len(self.samples),
        }


def mask_bbox(mask):
    """Tight (x, y, w, h) of a boolean canvas mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def crop_mask(mask, bbox):
    x, y, w, h = bbox
    return mask[y : y + h, x : x + w].copy()


def full_mask(ann, canvas_hw):
    m = np.zeros(canvas_hw, dtype=bool)
    x, y, w, h = ann.bbox
    m[y : y + h, x : x + w] = ann.mask
    return m


def _background(rng, canvas_hw):
    import colorsys

    h, w = canvas_hw
    hue, sat, val = rng.uniform(0, 1), rng.uniform(0.05, 0.25), rng.uniform(0.25, 0.6)
    base = np.asarray(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    img += rng.normal(0.0, 0.02, size=(3, h, w)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _paint(img, mask, rgb, shading, texture):
    color = rgb * shading
    for ch in range(3):
        plane = img[ch]
        if texture is None:
            plane[mask] = color[ch]
        else:
            plane[mask] = (color[ch] * texture)[mask]


def render_scene(spec, classes, probs, image_id, rng):
    """One detection scene: background, objects, visible-mask annotations."""
    h, w = spec.canvas
    img = _background(rng, (h, w))
    n_objects = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    placed = []  # full-canvas visible masks, parallel to raw annotation list
    records = []
    for _ in range(n_objects):
        class_id = int(rng.choice(len(classes), p=probs))
        sc = classes[class_id]
        for _attempt in range(8):
            mask, rgb, texture = sample_instance(sc, rng, (h, w))
            if mask.sum() < MIN_VISIBLE_PIXELS:
                continue
            if not spec.occlusion_allowed and any((mask & p).any() for p in placed):
                continue
            break
        else:
            continue
        shading = rng.uniform(0.8, 1.0)
        _paint(img, mask, rgb, shading, texture)
        for p in placed:
            p &= ~mask
        placed.append(mask.copy())
        records.append(class_id)
    annotations = []
    ann_id = image_id * 1000
    for class_id, visible in zip(records, placed):
        if visible.sum() < MIN_VISIBLE_PIXELS:
            continue
        bbox = mask_bbox(visible)
        annotations.append(Annotation(class_id, bbox, crop_mask(visible, bbox), ann_id))
        ann_id += 1
    return SceneSample(image=img, annotations=annotations, image_id=image_id)


def generate_detection_set(spec, n_images, dataset_id="detection"):
    """Deterministic detection dataset for (spec, seed)."""
    spec.validate()
    if n_images < 1:
        raise ConfigurationError("n_images must be >= 1")
    classes = build_catalog(spec.n_classes, spec.size_range, spec.appearance)
    probs = spec.class_probs()
    samples = [
        render_scene(spec, classes, probs, i, stream(spec.seed, "det-image", i))
        for i in range(n_images)
    ]
    return Dataset(
        dataset_id=dataset_id,
        kind="detection",
        canvas=spec.canvas,
        classes=classes,
        samples=samples,
        spec={"scene": spec.__dict__ | {"canvas": list(spec.canvas)}, "n_images": n_images},
        seed=spec.seed,
    )


CLASSIFY_SCALES = {
    "small": {"n_classes": 10, "n_images": 2000, "appearance": "narrow"},
    "large_diverse": {"n_classes": 40, "n_images": 10000, "appearance": "wide"},
}


def render_classification_image(sc, canvas_hw, rng):
    h, w = canvas_hw
    img = _background(rng, (h, w))
    # one dominant object, roughly centered, sized to fill much of the frame
    scale = rng.uniform(0.9, 1.8)
    center = (w / 2 + rng.uniform(-4, 4), h / 2 + rng.uniform(-4, 4))
    mask, rgb, texture = sample_instance(sc, rng, (h, w), scale=scale, center=center)
    _paint(img, mask, rgb, rng.uniform(0.8, 1.0), texture)
    return img


def generate_classification_set(scale, canvas=(32, 32), seed=0, n_images=None, n_classes=None,
                                appearance=None, dataset_id=None):
    """Single-object labelled images at one of the two pretraining scales."""
    if scale not in CLASSIFY_SCALES:
        raise ConfigurationError(f"unknown scale {scale!r}; expected one of {sorted(CLASSIFY_SCALES)}")
    defaults = CLASSIFY_SCALES[scale]
    n_images = n_images or defaults["n_images"]
    n_classes = n_classes or defaults["n_classes"]
    appearance = appearance or defaults["appearance"]
    classes = build_catalog(n_classes, size_range=(5.0, 10.0), appearance=appearance)
    samples = []
    for i in range(n_images):
        rng = stream(seed, f"cls-{scale}", i)
        label = int(rng.integers(0, n_classes))
        img = render_classification_image(classes[label], canvas, rng)
        samples.append(SceneSample(image=img, annotations=[], image_id=i, label=label))
    return Dataset(
        dataset_id=dataset_id or f"classify-{scale}",
        kind="classification",
        canvas=canvas,
        classes=classes,
        samples=samples,
        spec={"scale": scale, "n_images": n_images, "n_classes": n_classes, "canvas": list(canvas)},
        seed=seed,
    )


def check_annotation_validity(sample, canvas_hw):
    """Raise DataError when any annotation violates geometric invariants."""
    h, w = canvas_hw
    for a in sample.annotations:
        x, y, bw, bh = a.bbox
        if bw <= 0 or bh <= 0:
            raise DataError(f"annotation {a.annotation_id} has non-positive extent {a.bbox}")
        if x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise DataError(f"annotation {a.annotation_id} bbox {a.bbox} leaves the {h}x{w} canvas")
        if a.mask.shape != (bh, bw):
            raise DataError(f"annotation {a.annotation_id} mask shape {a.mask.shape} mismatches bbox {a.bbox}")
        if not a.mask.any():
            raise DataError(f"annotation {a.annotation_id} mask is empty")
        if not (a.mask[0].any() and a.mask[-1].any() and a.mask[:, 0].any() and a.mask[:, -1].any()):
            raise DataError(f"annotation {a.annotation_id} bbox is not tight on its mask")


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    mask_index = {}
    with open(out / "images.bin", "wb") as imgf, open(out / "masks.bin", "wb") as maskf:
        img_off = 0
        mask_off = 0
        for s in dataset.samples:
            arr = np.ascontiguousarray(s.image.astype("<f4"))
            imgf.write(arr.tobytes())
            index.append({"image_id": s.image_id, "offset": img_off, "shape": list(arr.shape)})
            img_off += arr.nbytes
            for a in s.annotations:
                m = np.ascontiguousarray(a.mask.astype(np.uint8))
                maskf.write(m.tobytes())
                mask_index[a.annotation_id] = {"offset": mask_off, "shape": list(m.shape)}
                mask_off += m.nbytes
    manifest = dataset.manifest_dict()
    manifest["samples"] = [
        {
            "image_id": s.image_id,
            "label": s.label,
            "annotations": [
                {
                    "annotation_id": a.annotation_id,
                    "class_id": a.class_id,
                    "bbox": list(a.bbox),
                    "mask": mask_index[a.annotation_id],
                }
                for a in s.annotations
            ],
        }
        for s in dataset.samples
    ]
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))


def load_dataset(in_dir):
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    index = json.loads((src / "index.json").read_text())
    images_raw = (src / "images.bin").read_bytes()
    masks_raw = (src / "masks.bin").read_bytes()
    offsets = {e["image_id"]: e for e in index}
    samples = []
    for srec in manifest["samples"]:
        e = offsets[srec["image_id"]]
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        img = np.frombuffer(images_raw, dtype="<f4", count=count, offset=e["offset"]).reshape(shape).copy()
        annotations = []
        for arec in srec["annotations"]:
            mh, mw = arec["mask"]["shape"]
            m = (
                np.frombuffer(masks_raw, dtype=np.uint8, count=mh * mw, offset=arec["mask"]["offset"])
                .reshape(mh, mw)
                .astype(bool)
            )
            annotations.append(Annotation(arec["class_id"], tuple(arec["bbox"]), m, arec["annotation_id"]))
        samples.append(
            SceneSample(image=img, annotations=annotations, image_id=srec["image_id"], label=srec["label"])
        )
    return Dataset(
        dataset_id=manifest["dataset_id"],
        kind=manifest["kind"],
        canvas=tuple(manifest["canvas"]),
        classes=[ShapeClass.from_dict(c) for c in manifest["classes"]],
        samples=samples,
        spec=manifest["spec"],
        seed=manifest["seed"],
    )
