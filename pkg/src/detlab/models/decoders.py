"""Feature pyramid decoders of configurable capacity.

``fpn_lite`` is the classic lightweight pyramid: 1x1 laterals, top-down sum
merges, one 3x3 output conv per level. ``multi_merge_lite`` stands in for a
searched pyramid: the same laterals followed by ``merge_repeats`` rounds of
top-down plus bottom-up sum merges, each merge owning a 3x3 conv, before the
per-level output convs. At equal filters it always carries strictly more
parameters than fpn_lite; the repeats and filter count are the main
trained-capacity dials of the lab.
"""

from __future__ import annotations

from .. import metering, ops
from ..nn import Conv2d, Module


class FpnLite(Module):
    variant = "fpn_lite"

    def __init__(self, in_channels, filters):
        super().__init__()
        self.levels = len(in_channels)
        for i, c in enumerate(in_channels):
            setattr(self, f"lateral{i}", Conv2d(c, filters, 1, "decoder", padding=0))
            setattr(self, f"output{i}", Conv2d(filters, filters, 3, "decoder"))

    def __call__(self, feats):
        with metering.scope("decoder"):
            p = [getattr(self, f"lateral{i}")(f) for i, f in enumerate(feats)]
            for i in range(self.levels - 2, -1, -1):
                p[i] = ops.add(p[i], ops.upsample_nearest2x(p[i + 1]))
            return [getattr(self, f"output{i}")(x) for i, x in enumerate(p)]


class MultiMergeLite(Module):
    variant = "multi_merge_lite"

    def __init__(self, in_channels, filters, merge_repeats):
        super().__init__()
        self.levels = len(in_channels)
        self.merge_repeats = merge_repeats
        for i, c in enumerate(in_channels):
            setattr(self, f"lateral{i}", Conv2d(c, filters, 1, "decoder", padding=0))
            setattr(self, f"output{i}", Conv2d(filters, filters, 3, "decoder"))
        for r in range(merge_repeats):
            for i in range(self.levels - 1):
                setattr(self, f"td{r}_{i}", Conv2d(filters, filters, 3, "decoder"))
                setattr(self, f"bu{r}_{i}", Conv2d(filters, filters, 3, "decoder"))

    def __call__(self, feats):
        with metering.scope("decoder"):
            p = [getattr(self, f"lateral{i}")(f) for i, f in enumerate(feats)]
            for r in range(self.merge_repeats):
                for i in range(self.levels - 2, -1, -1):
                    merged = ops.add(p[i], ops.upsample_nearest2x(p[i + 1]))
                    p[i] = getattr(self, f"td{r}_{i}")(ops.relu(merged))
                for i in range(self.levels - 1):
                    merged = ops.add(p[i + 1], ops.max_pool2d(p[i], 2))
                    p[i + 1] = getattr(self, f"bu{r}_{i}")(ops.relu(merged))
            return [getattr(self, f"output{i}")(x) for i, x in enumerate(p)]


def build_decoder(spec, in_channels):
    if spec.variant == "fpn_lite":
        return FpnLite(in_channels, spec.filters)
    return MultiMergeLite(in_channels, spec.filters, spec.merge_repeats)
