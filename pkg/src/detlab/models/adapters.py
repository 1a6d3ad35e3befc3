"""Residual adapters: small trainable bottlenecks added inside a frozen
backbone. Each backbone block output y becomes y + P(A(y)) where A is a
1x1 bottleneck + relu and P a 1x1 projection initialized to exact zero, so
insertion leaves the network function unchanged until training moves P.
"""

from __future__ import annotations

from .. import metering, ops
from ..errors import ConfigurationError
from ..nn import Conv2d, Module


class ResidualAdapter(Module):
    def __init__(self, channels, bottleneck_ratio):
        super().__init__()
        hidden = max(1, int(round(channels * bottleneck_ratio)))
        self.squeeze = Conv2d(channels, hidden, 1, "adapter", padding=0)
        self.proj = Conv2d(hidden, channels, 1, "adapter", padding=0, init="zero")

    def __call__(self, y):
        with metering.scope("adapter"):
            return ops.add(y, self.proj(ops.relu(self.squeeze(y))))


def insert_adapters(model, adapter_spec, seed=0):
    """Add a trainable adapter after every backbone block of a frozen model.

    Raises ConfigurationError when any backbone parameter is still
    trainable: adapters complement freezing, they do not ride along with
    fine-tuning.
    """
    adapter_spec.validate()
    backbone = model.backbone
    for name, p in backbone.named_parameters():
        if p.partition == "backbone" and p.trainable:
            raise ConfigurationError(
                f"adapters require a frozen backbone, but {name!r} is trainable"
            )
    if backbone.has_adapters():
        raise ConfigurationError("adapters already inserted")
    for si, stage in enumerate(backbone.stages()):
        for bi in range(stage.n_blocks):
            mod = ResidualAdapter(stage.down.weight.shape[0], adapter_spec.bottleneck_ratio)
            setattr(backbone, f"adapter_s{si}b{bi}", mod)
            backbone._adapters.append((si, bi, mod))
    model.assign_names()
    model.initialize(seed, only=lambda name: ".adapter_s" in name)
    # keep dtype uniform with the host model
    dtype = backbone.stem.weight.dtype
    for _, _, mod in backbone._adapters:
        for _, p in mod.named_parameters():
            p.data = p.data.astype(dtype)
    return model
