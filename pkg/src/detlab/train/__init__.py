from .checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint, snapshot
from .loop import (
    balanced_class_weights,
    balanced_stage2_tune,
    classifier_accuracy,
    evaluate_detector,
    pretrain_classifier,
    read_run_log,
    train_detector,
    write_run_log,
)
from .optim import FULL_SCALE_REFERENCE, SGD, TrainConfig, effective_warmup, lr_at
from .regimes import REGIMES, partition_parameters, partition_summary

__all__ = [
    "Checkpoint", "load_checkpoint", "load_into", "save_checkpoint", "snapshot",
    "balanced_class_weights", "balanced_stage2_tune", "classifier_accuracy",
    "evaluate_detector", "pretrain_classifier", "read_run_log", "train_detector",
    "write_run_log", "FULL_SCALE_REFERENCE", "SGD", "TrainConfig", "effective_warmup",
    "lr_at", "REGIMES", "partition_parameters", "partition_summary",
]
