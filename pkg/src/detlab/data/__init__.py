from .augment import AugmentPolicy, CopyPastePolicy, LsjPolicy, apply_policy, copy_paste_augment, lsj_augment, resize_scene
from .catalog import FAMILIES, ShapeClass, build_catalog
from .cocojson import CocoManifest, dataset_to_coco, read_coco_json, read_detections_json, write_coco_json, write_detections_json
from .scenes import (
    Annotation,
    Dataset,
    SceneSample,
    SceneSpec,
    check_annotation_validity,
    generate_classification_set,
    generate_detection_set,
    load_dataset,
    save_dataset,
)

__all__ = [
    "AugmentPolicy", "CopyPastePolicy", "LsjPolicy", "apply_policy", "copy_paste_augment",
    "lsj_augment", "resize_scene", "FAMILIES", "ShapeClass", "build_catalog", "CocoManifest",
    "dataset_to_coco", "read_coco_json", "read_detections_json", "write_coco_json",
    "write_detections_json", "Annotation", "Dataset", "SceneSample", "SceneSpec",
    "check_annotation_validity", "generate_classification_set", "generate_detection_set",
    "load_dataset", "save_dataset",
]
