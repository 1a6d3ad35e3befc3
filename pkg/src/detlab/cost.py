"""Parameter and FLOP accounting per partition.

Parameter counts are exact integer sums over the manifest. FLOPs come from
a traced forward pass with the op-level meter active: forward cost is the
analytic per-op count (2*k^2*Cin*Cout*Hout*Wout per conv output, 2*in*out
per linear row), backward cost is one forward-equivalent per gradient the
op must produce, and ops below the lowest trainable parameter contribute
zero backward cost because they are never recorded. The region heads see a
proposal-dependent workload, so the trace pins the region count and the
report carries a (low, high) bound from the configured caps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metering
from .models.heads import PROPOSALS_EVAL, ROI_SAMPLES
from .tensor import Tape, Tensor, record
from .train.regimes import partition_summary

PARTITIONS = ("backbone", "adapter", "decoder", "head")


@dataclass
class CostReport:
    model_label: str = ""
    regime: str = ""
    params_total: int = 0
    params_trained: int = 0
    trained_fraction: float = 0.0
    params_by_partition: dict = field(default_factory=dict)
    trained_by_partition: dict = field(default_factory=dict)
    flops_forward: dict = field(default_factory=dict)
    flops_backward: dict = field(default_factory=dict)
    activation_bytes_training: int = 0
    flops_forward_bounds: tuple = (0, 0)  # region-head workload at (0, train-cap) regions
    rois_per_image_traced: int = 0
    wall_seconds: float | None = None

    def total_forward(self):
        return sum(self.flops_forward.values())

    def total_backward(self):
        return sum(self.flops_backward.values())

    def total_training_flops(self):
        return self.total_forward() + self.total_backward()

    def to_dict(self):
        return {
            "model": self.model_label,
            "regime": self.regime,
            "params_total": self.params_total,
            "params_trained": self.params_trained,
            "trained_fraction": self.trained_fraction,
            "params_by_partition": self.params_by_partition,
            "trained_by_partition": self.trained_by_partition,
            "flops_forward": self.flops_forward,
            "flops_backward": self.flops_backward,
            "activation_bytes_training": self.activation_bytes_training,
            "flops_forward_bounds": list(self.flops_forward_bounds),
            "rois_per_image_traced": self.rois_per_image_traced,
            "wall_seconds": self.wall_seconds,
        }


def count_params(model, regime_label=""):
    """Exact parameter counts from the manifest; regime must be applied."""
    summary = partition_summary(model)
    report = CostReport(regime=regime_label)
    report.params_total = summary["total_params"]
    report.params_trained = summary["trainable_params"]
    report.trained_fraction = summary["trainable_fraction"]
    report.params_by_partition = {k: summary[k]["params"] for k in PARTITIONS}
    report.trained_by_partition = {k: summary[k]["trainable"] for k in PARTITIONS}
    return report


def _traced_forward(model, input_shape, rois_per_image):
    images = Tensor(np.zeros(input_shape, dtype=np.float32))
    meter = metering.CostMeter()
    tape = Tape()
    with metering.meter(meter), record(tape):
        model.forward_detect(images, train=False, trace_rois=rois_per_image)
    tape.clear()
    return meter


def estimate_flops(model, input_shape, regime_label=""):
    """Per-partition forward/backward FLOPs and saved-activation bytes.

    The trace uses the training-time region sample cap per image; the
    forward bounds pair re-traces at 0 and at the eval proposal cap, which
    brackets every reachable region-head workload.
    """
    report = count_params(model, regime_label)
    rois = ROI_SAMPLES if model.spec.head.kind == "two_stage" else 0
    meter = _traced_forward(model, input_shape, rois)
    report.rois_per_image_traced = rois
    report.flops_forward = dict(meter.flops_forward)
    report.flops_backward = dict(meter.flops_backward)
    report.activation_bytes_training = meter.total_saved_bytes()
    if model.spec.head.kind == "two_stage":
        low = _traced_forward(model, input_shape, 0).total_forward()
        high = _traced_forward(model, input_shape, PROPOSALS_EVAL).total_forward()
        report.flops_forward_bounds = (low, high)
    else:
        total = report.total_forward()
        report.flops_forward_bounds = (total, total)
    return report


def training_cost_summary(run_log, cost_report, eval_report=None, baseline_map=None):
    """One comparison-table row joining measured and estimated quantities."""
    wall = math.fsum(e["wall_seconds"] for e in run_log) if run_log else 0.0
    measured_fwd = sum(e.get("flops_forward", 0) for e in run_log)
    measured_bwd = sum(e.get("flops_backward", 0) for e in run_log)
    map_value = eval_report.map if eval_report is not None else None
    delta = None
    if map_value is not None and baseline_map is not None:
        delta = map_value - baseline_map
    return {
        "model": cost_report.model_label,
        "regime": cost_report.regime,
        "params_total": cost_report.params_total,
        "params_trained": cost_report.params_trained,
        "trained_fraction": cost_report.trained_fraction,
        "est_flops_forward": cost_report.total_forward(),
        "est_flops_backward": cost_report.total_backward(),
        "activation_bytes": cost_report.activation_bytes_training,
        "measured_flops_forward": measured_fwd,
        "measured_flops_backward": measured_bwd,
        "wall_seconds": wall,
        "epochs": len(run_log),
        "mAP": map_value,
        "delta_mAP": delta,
    }


def render_cost_table(rows):
    """Human-readable table: model, params, trained share, signed mAP delta."""
    header = f"{'model':<28} {'total params':>14} {'trained':>14} {'trained %':>10} {'d mAP':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        pct = f"{100.0 * r['params_trained'] / r['params_total']:.1f}%" if r["params_total"] else "-"
        delta = "null" if r.get("delta_mAP") is None else f"{100.0 * r['delta_mAP']:+.1f}"
        lines.append(
            f"{r['model']:<28} {r['params_total']:>14,} {r['params_trained']:>14,} {pct:>10} {delta:>8}"
        )
    return "\n".join(lines) + "\n"
