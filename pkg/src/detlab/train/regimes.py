"""Training regimes: how the backbone relates to its pretraining.

Scratch           random backbone, everything trainable
FineTune          pretrained backbone, everything trainable
Freeze            pretrained backbone, backbone partition frozen
FreezeWithAdapters  Freeze plus trainable residual adapters inside it

Applying a regime loads the classification checkpoint where one is
required, sets every parameter's trainable flag, pins the backbone's
normalization mode (frozen statistics whenever the backbone is frozen),
and returns a per-partition parameter summary.
"""

from __future__ import annotations

from ..errors import ConfigurationError
from ..nn import set_bn_mode
from ..models.adapters import insert_adapters
from .checkpoint import load_into

REGIMES = ("Scratch", "FineTune", "Freeze", "FreezeWithAdapters")


def partition_parameters(model, regime, checkpoint=None, adapter_spec=None, seed=0):
    """Apply a regime to a built detector and summarize the partitions."""
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    needs_checkpoint = regime in ("FineTune", "Freeze", "FreezeWithAdapters")
    if needs_checkpoint and checkpoint is None:
        raise ConfigurationError(
            f"{regime} requires a classification checkpoint; refusing to reuse "
            "randomly initialized backbone weights"
        )
    if checkpoint is not None and needs_checkpoint:
        load_into(model, checkpoint, prefix="backbone.")

    frozen_backbone = regime in ("Freeze", "FreezeWithAdapters")
    for _, p in model.named_parameters():
        if p.partition == "backbone":
            p.trainable = not frozen_backbone
        else:
            p.trainable = True
        if not p.trainable:
            p.grad = None

    if regime == "FreezeWithAdapters":
        spec = adapter_spec if adapter_spec is not None else model.spec.adapter
        if not model.backbone.has_adapters():
            insert_adapters(model, spec, seed=seed)
        for _, p in model.named_parameters():
            if p.partition == "adapter":
                p.trainable = True

    set_bn_mode(model.backbone, "frozen_stats" if frozen_backbone else "train_stats")
    return partition_summary(model)


def partition_summary(model):
    summary = {k: {"params": 0, "trainable": 0} for k in ("backbone", "adapter", "decoder", "head")}
    total = trained = 0
    for _, p in model.named_parameters():
        summary[p.partition]["params"] += p.size
        total += p.size
        if p.trainable:
            summary[p.partition]["trainable"] += p.size
            trained += p.size
    summary["total_params"] = total
    summary["trainable_params"] = trained
    summary["trainable_fraction"] = trained / total if total else 0.0
    return summary
