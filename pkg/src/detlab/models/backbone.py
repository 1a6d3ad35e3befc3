"""Residual convolutional backbone with a classification head.

The backbone is the component that gets pretrained on classification and
then reused (frozen, fine-tuned, or re-randomized) for detection. Stage i
emits a feature map at stride 2**(i+2); the classifier head (global average
pool + linear) lives in the same partition so a pretraining checkpoint
covers everything the detector reuses.
"""

from __future__ import annotations

from .. import metering, ops
from ..nn import BatchNorm2d, Conv2d, Linear, Module


class ResidualBlock(Module):
    def __init__(self, channels, partition="backbone"):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, partition, bias=False)
        self.bn1 = BatchNorm2d(channels, partition)
        self.conv2 = Conv2d(channels, channels, 3, partition, bias=False)
        self.bn2 = BatchNorm2d(channels, partition)

    def __call__(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ops.relu(ops.add(h, x))


class Stage(Module):
    def __init__(self, cin, cout, blocks, partition="backbone"):
        super().__init__()
        self.down = Conv2d(cin, cout, 3, partition, stride=2, bias=False)
        self.down_bn = BatchNorm2d(cout, partition)
        for i in range(blocks):
            setattr(self, f"block{i}", ResidualBlock(cout, partition))
        self.n_blocks = blocks

    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.n_blocks)]


class Backbone(Module):
    """Feature extractor; ``adapters`` stays empty until explicitly inserted."""

    def __init__(self, spec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c0 = spec.stage_channels[0]
        self.stem = Conv2d(spec.input_channels, c0, 3, "backbone", bias=False)
        self.stem_bn = BatchNorm2d(c0, "backbone")
        cin = c0
        for i, (c, b) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
            setattr(self, f"stage{i}", Stage(cin, c, b))
            cin = c
        self.classifier = Linear(spec.stage_channels[-1], spec.num_pretrain_classes, "backbone")
        self._adapters = []  # (stage_idx, block_idx) -> module, filled by insert_adapters

    @property
    def strides(self):
        return tuple(4 * 2**i for i in range(len(self.spec.stage_channels)))

    def stages(self):
        return [getattr(self, f"stage{i}") for i in range(len(self.spec.stage_channels))]

    def features(self, x):
        """Per-stage feature maps, adapters applied where inserted."""
        with metering.scope("backbone"):
            h = ops.relu(self.stem_bn(self.stem(x)))
            h = ops.max_pool2d(h, 2)
            feats = []
            for si, stage in enumerate(self.stages()):
                h = ops.relu(stage.down_bn(stage.down(h)))
                for bi, block in enumerate(stage.blocks()):
                    h = block(h)
                    adapter = self._adapter_at(si, bi)
                    if adapter is not None:
                        h = adapter(h)
                feats.append(h)
        return feats

    def classify(self, x):
        feats = self.features(x)
        with metering.scope("backbone"):
            pooled = ops.global_avg_pool(feats[-1])
            return self.classifier(pooled)

    def _adapter_at(self, stage_idx, block_idx):
        for si, bi, mod in self._adapters:
            if (si, bi) == (stage_idx, block_idx):
                return mod
        return None

    def has_adapters(self):
        return bool(self._adapters)
