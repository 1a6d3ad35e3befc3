"""Training loops: classifier pretraining, detector training under a
regime, class-balanced second-stage tuning, and detector evaluation.

Every loop draws batch order and per-sample augmentation from streams keyed
by (seed, epoch, index), so identical (seed, config, data) runs are
bit-identical. Run logs are one dict per epoch: loss terms, learning rate,
wall seconds, and measured FLOP tallies from the op-level meter.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .. import losses as loss_lib
from .. import metering, ops
from ..errors import ConfigurationError, DataError
from ..models.backbone import Backbone
from ..nn import set_bn_mode
from ..rng import stream
from ..tensor import Tape, Tensor, backward, record
from ..data.augment import apply_policy
from ..evalmetrics.ap import compute_report
from .checkpoint import snapshot
from .optim import SGD, lr_at

log = logging.getLogger(__name__)


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _gt_from_sample(sample):
    if not sample.annotations:
        return {"boxes": np.zeros((0, 4), dtype=np.float32), "labels": np.zeros(0, dtype=np.int64)}
    boxes = np.asarray(
        [(a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]) for a in sample.annotations],
        dtype=np.float32,
    )
    labels = np.asarray([a.class_id for a in sample.annotations], dtype=np.int64)
    return {"boxes": boxes, "labels": labels}


def pretrain_classifier(backbone_spec, dataset, config):
    """Train backbone + classification head; returns (checkpoint, run log)."""
    config.validate()
    backbone_spec.validate()
    if dataset.n_classes < 2:
        raise DataError("classification needs at least 2 classes")
    labels_all = np.asarray([s.label for s in dataset.samples])
    if labels_all.min() < 0 or labels_all.max() >= backbone_spec.num_pretrain_classes:
        raise DataError(
            f"labels range [{labels_all.min()}, {labels_all.max()}] outside "
            f"[0, {backbone_spec.num_pretrain_classes})"
        )
    model = Backbone(backbone_spec)
    model.assign_names("backbone.")
    model.initialize(config.seed, prefix="backbone.")
    set_bn_mode(model, "train_stats")
    opt = SGD(model, config)
    n = len(dataset.samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    run_log = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = stream(config.seed, "order", epoch).permutation(n)
        epoch_loss, epoch_hits, seen = 0.0, 0, 0
        meter = metering.CostMeter()
        with metering.meter(meter):
            for batch_idx in _batches(n, config.batch_size, order):
                images = Tensor(np.stack([dataset.samples[i].image for i in batch_idx]))
                labels = labels_all[batch_idx]
                tape = Tape()
                with record(tape):
                    logits = model.classify(images)
                    loss = loss_lib.softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss.data):
                    raise RuntimeError(f"NaN loss at step {step}: classify_ce")
                opt.zero_grad()
                backward(loss, tape)
                lr = lr_at(step, total_steps, config)
                opt.step(lr)
                epoch_loss += float(loss.data) * len(batch_idx)
                epoch_hits += int((logits.data.argmax(axis=1) == labels).sum())
                seen += len(batch_idx)
                step += 1
        run_log.append(
            {
                "epoch": epoch,
                "loss_terms": {"classify_ce": epoch_loss / max(1, seen)},
                "accuracy": epoch_hits / max(1, seen),
                "lr": lr_at(step - 1, total_steps, config) if step else config.base_lr,
                "wall_seconds": time.perf_counter() - t0,
                "flops_forward": meter.total_forward(),
                "flops_backward": meter.total_backward(),
            }
        )
    ckpt = snapshot(
        model,
        rng_state={"seed": config.seed, "steps": step},
        meta={"kind": "classification", "dataset_id": dataset.dataset_id,
              "num_classes": backbone_spec.num_pretrain_classes},
    )
    return ckpt, run_log


def classifier_accuracy(model, dataset, restrict_classes=None, batch_size=64):
    """Top-1 accuracy with frozen statistics; optionally masked to a class subset."""
    set_bn_mode(model, "frozen_stats")
    hits = total = 0
    n = len(dataset.samples)
    for start in range(0, n, batch_size):
        batch = dataset.samples[start : start + batch_size]
        images = Tensor(np.stack([s.image for s in batch]))
        logits = model.classify(images).data
        if restrict_classes is not None:
            mask = np.full(logits.shape[1], -np.inf)
            mask[list(restrict_classes)] = 0.0
            logits = logits + mask
        pred = logits.argmax(axis=1)
        hits += int((pred == np.asarray([s.label for s in batch])).sum())
        total += len(batch)
    return hits / max(1, total)


def _sum_losses(loss_dict, weights=None):
    total = None
    for name, value in loss_dict.items():
        term = value if weights is None else ops.mul_scalar(value, weights.get(name, 1.0))
        total = term if total is None else ops.add(total, term)
    return total


def train_detector(model, regime, dataset, config, augment, loss_weights=None):
    """Run the detection training loop; returns (model, run log).

    ``partition_parameters`` must already have been applied: this loop only
    consumes the trainable flags and normalization modes the regime set.
    """
    config.validate()
    augment.validate()
    n = len(dataset.samples)
    if n == 0:
        raise DataError("detection dataset is empty")
    canvas = dataset.canvas
    opt = SGD(model, config)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    run_log = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = stream(config.seed, "order", epoch).permutation(n)
        term_sums, term_counts = {}, {}
        meter = metering.CostMeter()
        with metering.meter(meter):
            for batch_pos, batch_idx in enumerate(_batches(n, config.batch_size, order)):
                samples = []
                for i in batch_idx:
                    rng = stream(config.seed, "aug", epoch, int(i))
                    donor = dataset.samples[int(rng.integers(0, n))]
                    samples.append(apply_policy(dataset.samples[i], augment, canvas, donor, rng))
                images = Tensor(np.stack([s.image for s in samples]))
                gt = [_gt_from_sample(s) for s in samples]
                target_rng = stream(config.seed, "targets", epoch, batch_pos)
                tape = Tape()
                with record(tape):
                    out = model.forward_detect(images, train=True, gt=gt, rng=target_rng)
                    total = _sum_losses(out.losses, loss_weights)
                for name, value in out.losses.items():
                    if not np.isfinite(value.data):
                        raise RuntimeError(f"NaN loss at step {step}: {name}")
                    term_sums[name] = term_sums.get(name, 0.0) + float(value.data)
                    term_counts[name] = term_counts.get(name, 0) + 1
                if total is not None:
                    opt.zero_grad()
                    backward(total, tape)
                    opt.step(lr_at(step, total_steps, config))
                step += 1
        fwd, bwd = meter.total_forward(), meter.total_backward()
        run_log.append(
            {
                "epoch": epoch,
                "loss_terms": {k: term_sums[k] / term_counts[k] for k in sorted(term_sums)},
                "lr": lr_at(step - 1, total_steps, config) if step else config.base_lr,
                "wall_seconds": time.perf_counter() - t0,
                "flops_forward": fwd,
                "flops_backward": bwd,
                "backward_flop_share": bwd / (fwd + bwd) if fwd + bwd else 0.0,
                "backbone_backward_flops": meter.flops_backward.get("backbone", 0),
            }
        )
    return model, run_log


def balanced_class_weights(annotation_counts, num_classes, alpha=1.0, background_weight=1.0):
    """Inverse-frequency class weights, mean-normalized over counted classes.

    Index 0 is the background column of the region classifier; class c maps
    to index c + 1. Classes with zero annotations keep weight 1 and are
    logged (they cannot appear as targets anyway).
    """
    counts = np.asarray([annotation_counts.get(c, 0) for c in range(num_classes)], dtype=np.float64)
    weights = np.ones(num_classes + 1, dtype=np.float64)
    weights[0] = background_weight
    counted = counts > 0
    for c in np.flatnonzero(~counted):
        log.warning("class %d has zero annotations; excluded from the balanced weight vector", c)
    if counted.any():
        vals = counts[counted]
        if np.all(vals == vals[0]):
            w = np.ones(vals.shape)  # degenerate uniform case stays exactly 1
        else:
            w = vals**-alpha
            w = w / w.mean()
        weights[1:][counted] = w
    return weights


def balanced_stage2_tune(model, dataset, config, augment, alpha=1.0, reinit_classifier=False):
    """Retrain only the final region classifier with inverse-frequency weights.

    Continues from the stage-1 classifier weights unless
    ``reinit_classifier`` is set. Every other parameter is frozen for the
    stage and comes out byte-identical.
    """
    if model.spec.head.kind != "two_stage":
        raise ConfigurationError("balanced second-stage tuning targets the two-stage region classifier")
    head = model.head
    classifier = head.final_classifier()
    classifier_params = {id(p) for _, p in classifier.named_parameters()}
    for _, p in model.named_parameters():
        p.trainable = id(p) in classifier_params
        p.grad = None
    set_bn_mode(model.backbone, "frozen_stats")
    if reinit_classifier:
        classifier.initialize(config.seed, prefix="stage2_reinit.")
    weights = balanced_class_weights(dataset.class_annotation_counts(), model.spec.head.num_classes, alpha)
    head.class_weights = weights
    try:
        model, run_log = train_detector(model, "stage2", dataset, config, augment)
    finally:
        head.class_weights = None
    return model, run_log


def evaluate_detector(model, dataset, eval_config=None, train_image_counts=None,
                      batch_size=8, score_threshold=0.02, nms_iou=0.5):
    """Detections + stratified report for a trained model on a dataset."""
    set_bn_mode(model, "frozen_stats")
    detections = []
    n = len(dataset.samples)
    max_dets = eval_config.max_dets_per_image if eval_config else 100
    for start in range(0, n, batch_size):
        batch = dataset.samples[start : start + batch_size]
        images = Tensor(np.stack([s.image for s in batch]))
        results = model.detect(images, score_threshold=score_threshold, nms_iou=nms_iou, max_dets=max_dets)
        for sample, (boxes, scores, classes) in zip(batch, results):
            for b, s, c in zip(boxes, scores, classes):
                detections.append(
                    {
                        "image_id": sample.image_id,
                        "category_id": int(c),
                        "bbox": (float(b[0]), float(b[1]), float(b[2] - b[0]), float(b[3] - b[1])),
                        "score": float(s),
                    }
                )
    report = compute_report(detections, dataset.to_eval_gt(), eval_config, train_image_counts)
    return detections, report


def write_run_log(run_log, path):
    with open(path, "w") as f:
        for entry in run_log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_run_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
