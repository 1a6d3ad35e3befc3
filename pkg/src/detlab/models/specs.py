"""Architecture specifications: the capacity dials of the lab.

Every spec is a frozen dataclass with a ``validate`` method raising
ConfigurationError on inconsistent values, plus dict (de)serialization for
experiment configs. Detector structure is a pure function of its spec.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..errors import ConfigurationError

DECODER_VARIANTS = ("fpn_lite", "multi_merge_lite")
HEAD_KINDS = ("single_stage", "two_stage")
DEFAULT_STRIDES = (4, 8, 16, 32)
CASCADE_DEFAULT_IOUS = (0.5, 0.6, 0.7)


@dataclass(frozen=True)
class BackboneSpec:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    input_channels: int = 3
    num_pretrain_classes: int = 40

    def validate(self):
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigurationError(
                f"stage_channels {self.stage_channels} and blocks_per_stage {self.blocks_per_stage} differ in length"
            )
        if len(self.stage_channels) < 3:
            raise ConfigurationError("backbone must emit at least 3 feature levels")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigurationError("stage channels and block counts must be >= 1")
        if self.input_channels < 1 or self.num_pretrain_classes < 2:
            raise ConfigurationError("need input_channels >= 1 and num_pretrain_classes >= 2")

    @property
    def num_levels(self):
        return len(self.stage_channels)


@dataclass(frozen=True)
class DecoderSpec:
    variant: str = "fpn_lite"
    filters: int = 256
    merge_repeats: int = 3
    levels: int = 4

    def validate(self):
        if self.variant not in DECODER_VARIANTS:
            raise ConfigurationError(f"unknown decoder variant {self.variant!r}; expected one of {DECODER_VARIANTS}")
        if self.filters < 1:
            raise ConfigurationError("decoder filters must be >= 1")
        if self.merge_repeats < 1:
            raise ConfigurationError("merge_repeats must be >= 1")
        if self.levels < 2:
            raise ConfigurationError("decoder needs at least 2 levels")


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple = (1.0, 2 ** (1.0 / 3.0), 2 ** (2.0 / 3.0))
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    strides: tuple = DEFAULT_STRIDES
    base_scale: float = 2.0

    def validate(self):
        if not self.scales or not self.aspect_ratios:
            raise ConfigurationError("anchors need at least one scale and one aspect ratio")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigurationError("anchor scales and aspect ratios must be positive")
        if any(s < 1 for s in self.strides):
            raise ConfigurationError("anchor strides must be >= 1")
        if self.base_scale <= 0:
            raise ConfigurationError("anchor base_scale must be positive")

    @property
    def per_cell(self):
        return len(self.scales) * len(self.aspect_ratios)


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "two_stage"
    rpn_convs: int = 2
    cascade_stages: int = 0
    cascade_ious: tuple = CASCADE_DEFAULT_IOUS
    head_filters: int = 256
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    num_classes: int = 12

    def validate(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if not (1 <= self.rpn_convs <= 4):
            raise ConfigurationError(f"rpn_convs must be in [1, 4], got {self.rpn_convs}")
        if self.cascade_stages < 0:
            raise ConfigurationError("cascade_stages must be >= 0")
        if self.cascade_stages > 0:
            ious = self.cascade_ious[: self.cascade_stages]
            if len(ious) < self.cascade_stages:
                raise ConfigurationError(
                    f"cascade_stages={self.cascade_stages} needs that many IoU thresholds, got {self.cascade_ious}"
                )
            if any(b <= a for a, b in zip(ious, ious[1:])):
                raise ConfigurationError(f"cascade IoU thresholds must be strictly increasing, got {ious}")
        if self.head_filters < 1 or self.num_classes < 1:
            raise ConfigurationError("head_filters and num_classes must be >= 1")
        self.anchors.validate()

    @property
    def stage_ious(self):
        """IoU threshold per region head stage (a single 0.5 stage when no cascade)."""
        if self.cascade_stages == 0:
            return (0.5,)
        return tuple(self.cascade_ious[: self.cascade_stages])


@dataclass(frozen=True)
class AdapterSpec:
    enabled: bool = False
    bottleneck_ratio: float = 0.25

    def validate(self):
        if not (0.0 < self.bottleneck_ratio <= 1.0):
            raise ConfigurationError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")


@dataclass(frozen=True)
class DetectorSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    head: HeadSpec = field(default_factory=HeadSpec)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)

    def validate(self):
        self.backbone.validate()
        self.decoder.validate()
        self.head.validate()
        self.adapter.validate()
        if self.decoder.levels > self.backbone.num_levels:
            raise ConfigurationError(
                f"decoder asks for {self.decoder.levels} levels but backbone "
                f"{self.backbone.stage_channels} emits only {self.backbone.num_levels}"
            )

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        def build(cls, sub, **extra):
            known = {f for f in cls.__dataclass_fields__}
            unknown = set(sub) - known
            if unknown:
                raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
            kw = {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
            kw.update(extra)
            return cls(**kw)

        known = {"backbone", "decoder", "head", "adapter"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown DetectorSpec keys: {sorted(unknown)}")
        head_d = dict(d.get("head", {}))
        anchors = build(AnchorConfig, head_d.pop("anchors", {}))
        spec = DetectorSpec(
            backbone=build(BackboneSpec, d.get("backbone", {})),
            decoder=build(DecoderSpec, d.get("decoder", {})),
            head=build(HeadSpec, head_d, anchors=anchors),
            adapter=build(AdapterSpec, d.get("adapter", {})),
        )
        spec.validate()
        return spec
