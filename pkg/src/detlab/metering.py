"""FLOP / activation-memory metering hooks used by the primitives.

A CostMeter aggregates per-partition forward FLOPs, backward FLOPs (coarse
2x/1x/0x model: one forward-equivalent per gradient the op must produce),
and bytes of activations saved for backward. Ops report into the active
meter; model components set the partition via :func:`scope` during their
forward pass. Everything is a no-op when no meter is active.
"""

from __future__ import annotations


class CostMeter:
    def __init__(self, detailed=False):
        self.flops_forward = {}
        self.flops_backward = {}
        self.saved_bytes = {}
        self.layers = [] if detailed else None
        self.detailed = detailed

    def add(self, partition, op_name, fwd, bwd, saved):
        self.flops_forward[partition] = self.flops_forward.get(partition, 0) + fwd
        self.flops_backward[partition] = self.flops_backward.get(partition, 0) + bwd
        self.saved_bytes[partition] = self.saved_bytes.get(partition, 0) + saved
        if self.detailed:
            self.layers.append((partition, op_name, fwd, bwd, saved))

    def total_forward(self):
        return sum(self.flops_forward.values())

    def total_backward(self):
        return sum(self.flops_backward.values())

    def total_saved_bytes(self):
        return sum(self.saved_bytes.values())


_ACTIVE_METER: CostMeter | None = None
_SCOPE = "other"


class meter:
    """Context manager that activates a CostMeter."""

    def __init__(self, m):
        self.m = m
        self._prev = None

    def __enter__(self):
        global _ACTIVE_METER
        self._prev = _ACTIVE_METER
        _ACTIVE_METER = self.m
        return self.m

    def __exit__(self, *exc):
        global _ACTIVE_METER
        _ACTIVE_METER = self._prev
        return False


class scope:
    """Attribute subsequent op costs to a named partition."""

    def __init__(self, partition):
        self.partition = partition
        self._prev = None

    def __enter__(self):
        global _SCOPE
        self._prev = _SCOPE
        _SCOPE = self.partition
        return self

    def __exit__(self, *exc):
        global _SCOPE
        _SCOPE = self._prev
        return False


def current_scope():
    return _SCOPE


def report(op_name, fwd, bwd, saved, partition=None):
    m = _ACTIVE_METER
    if m is not None:
        m.add(partition if partition is not None else _SCOPE, op_name, fwd, bwd, saved)
