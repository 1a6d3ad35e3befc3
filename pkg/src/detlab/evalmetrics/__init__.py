from .ap import EvalConfig, EvalReport, average_precision, compute_report, interpolated_ap
from .boxes import iou, nms
from .curves import classwise_relative_curve, gaussian_weights, write_curve_csv

__all__ = [
    "EvalConfig",
    "EvalReport",
    "average_precision",
    "compute_report",
    "interpolated_ap",
    "iou",
    "nms",
    "classwise_relative_curve",
    "gaussian_weights",
    "write_curve_csv",
]
