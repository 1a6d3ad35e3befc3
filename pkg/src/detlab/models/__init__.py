from .specs import (
    AdapterSpec,
    AnchorConfig,
    BackboneSpec,
    DecoderSpec,
    DetectorSpec,
    HeadSpec,
)
from .adapters import insert_adapters
from .detector import Detector, build_detector

__all__ = [
    "AdapterSpec",
    "AnchorConfig",
    "BackboneSpec",
    "DecoderSpec",
    "DetectorSpec",
    "HeadSpec",
    "Detector",
    "build_detector",
    "insert_adapters",
]
