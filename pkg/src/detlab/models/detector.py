"""Detector assembly: backbone + pyramid decoder + detection head.

The model's structure (parameter names, shapes, partitions) is a pure
function of its DetectorSpec; weights are a pure function of (spec, seed).
The parameter manifest - one line "name shape partition trainable" per
parameter - is the contract surface the accounting and persistence layers
work against.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ContractError
from ..nn import Module, set_bn_mode
from ..tensor import Tensor
from . import anchors as anchor_lib
from .backbone import Backbone
from .decoders import build_decoder
from .heads import SingleStageHead, TwoStageHead


class Detector(Module):
    def __init__(self, spec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.backbone = Backbone(spec.backbone)
        used = spec.decoder.levels
        in_channels = spec.backbone.stage_channels[:used]
        self.level_strides = self.backbone.strides[:used]
        self.decoder = build_decoder(spec.decoder, in_channels)
        head_cls = TwoStageHead if spec.head.kind == "two_stage" else SingleStageHead
        self.head = head_cls(spec.head, spec.decoder.filters, self.level_strides)

    # -- forward passes ----------------------------------------------------

    def pyramid(self, images):
        feats = self.backbone.features(images)[: self.spec.decoder.levels]
        return self.decoder(feats)

    def forward_classify(self, images):
        """Class logits from backbone + global pool + linear head only."""
        self._check_channels(images)
        return self.backbone.classify(images)

    def forward_detect(self, images, train=False, gt=None, rng=None, trace_rois=None):
        """Raw detection outputs (losses included when gt is supplied).

        ``trace_rois`` pins the region-head workload to a fixed number of
        regions per image; the accounting layer uses it to trace
        proposal-dependent cost deterministically.
        """
        self._check_channels(images)
        h, w = images.shape[2], images.shape[3]
        max_stride = self.level_strides[-1]
        if h % max_stride or w % max_stride:
            raise ContractError(
                f"image extents {h}x{w} must be divisible by the largest stride {max_stride}"
            )
        feats = self.pyramid(images)
        shapes = [(f.shape[2], f.shape[3]) for f in feats]
        anchors = anchor_lib.pyramid_anchors(shapes, self.level_strides, self.spec.head.anchors)
        return self.head.forward(feats, anchors, (h, w), train=train, gt=gt, rng=rng, trace_rois=trace_rois)

    def _check_channels(self, images):
        if not isinstance(images, Tensor):
            raise ContractError("images must be a Tensor")
        if images.ndim != 4 or images.shape[1] != self.spec.backbone.input_channels:
            raise ContractError(
                f"expected [N, {self.spec.backbone.input_channels}, H, W] images, got {tuple(images.shape)}"
            )

    # -- inference post-processing ------------------------------------------

    def detect(self, images, score_threshold=0.02, nms_iou=0.5, max_dets=100):
        """Final per-image detections: list of (boxes_xyxy, scores, class_ids)."""
        out = self.forward_detect(images, train=False)
        n = images.shape[0]
        h, w = images.shape[2], images.shape[3]
        if out.kind == "two_stage":
            return self._detect_two_stage(out, n, (h, w), score_threshold, nms_iou, max_dets)
        return self._detect_single_stage(out, n, (h, w), score_threshold, nms_iou, max_dets)

    def _finalize(self, boxes, scores, classes, score_threshold, nms_iou, max_dets):
        keep = scores >= score_threshold
        boxes, scores, classes = boxes[keep], scores[keep], classes[keep]
        kept = []
        for c in np.unique(classes):
            idx = np.flatnonzero(classes == c)
            from ..evalmetrics.boxes import nms_xyxy

            for k in nms_xyxy(boxes[idx], scores[idx], nms_iou):
                kept.append(idx[k])
        if not kept:
            return (np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.int64))
        kept = np.asarray(kept)
        order = np.lexsort((*boxes[kept].T[::-1], -scores[kept]))[:max_dets]
        kept = kept[order]
        return boxes[kept], scores[kept], classes[kept]

    def _detect_two_stage(self, out, n, hw, score_threshold, nms_iou, max_dets):
        results = []
        last = out.stage_outputs[-1]
        if last["cls_logits"] is None:
            return [
                (np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.int64))
                for _ in range(n)
            ]
        z = last["cls_logits"].data
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        boxes_all = anchor_lib.decode_boxes(last["rois"], last["box_deltas"].data, clip_hw=hw)
        batch_idx = last["batch_idx"]
        k = self.spec.head.num_classes
        for i in range(n):
            sel = batch_idx == i
            b = boxes_all[sel]
            p = probs[sel][:, 1:]  # drop background column
            if b.shape[0] == 0:
                results.append((np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.int64)))
                continue
            boxes = np.repeat(b, k, axis=0)
            scores = p.reshape(-1)
            classes = np.tile(np.arange(k), b.shape[0])
            results.append(self._finalize(boxes, scores, classes, score_threshold, nms_iou, max_dets))
        return results

    def _detect_single_stage(self, out, n, hw, score_threshold, nms_iou, max_dets):
        anchors_cat = np.concatenate(out.anchors, axis=0)
        a_tot = anchors_cat.shape[0]
        k = self.spec.head.num_classes
        scores_all = 1.0 / (1.0 + np.exp(-out.cls_flat.data.reshape(n, a_tot, k)))
        deltas_all = out.box_flat.data.reshape(n, a_tot, 4)
        results = []
        for i in range(n):
            s = scores_all[i]
            flat = s.reshape(-1)
            top = np.argsort(-flat, kind="stable")[: min(1000, flat.size)]
            a_idx, c_idx = top // k, top % k
            boxes = anchor_lib.decode_boxes(anchors_cat[a_idx], deltas_all[i][a_idx], clip_hw=hw)
            results.append(self._finalize(boxes, flat[top], c_idx, score_threshold, nms_iou, max_dets))
        return results

    # -- manifest -----------------------------------------------------------

    def manifest(self):
        """(name, shape, partition, trainable) for every parameter, in order."""
        return [
            (name, tuple(int(d) for d in p.shape), p.partition, bool(p.trainable))
            for name, p in self.named_parameters()
        ]

    def manifest_text(self):
        lines = []
        for name, shape, partition, trainable in self.manifest():
            shape_s = "x".join(str(d) for d in shape)
            lines.append(f"{name} {shape_s} {partition} {trainable}")
        return "\n".join(lines) + "\n"

    def partition_counts(self):
        counts = dict.fromkeys(("backbone", "adapter", "decoder", "head"), 0)
        for _, p in self.named_parameters():
            counts[p.partition] += p.size
        return counts


def build_detector(spec, seed=0):
    """Construct and initialize a detector; structure depends only on spec."""
    spec.validate()
    model = Detector(spec)
    model.assign_names()
    model.initialize(seed)
    if spec.decoder.variant == "multi_merge_lite" and spec.decoder.levels >= 2:
        fpn_like = sum(
            p.size
            for name, p in model.named_parameters()
            if p.partition == "decoder" and (".lateral" in name or ".output" in name)
        )
        total = sum(p.size for _, p in model.named_parameters() if p.partition == "decoder")
        if total <= fpn_like:
            raise ConfigurationError("multi_merge_lite must exceed fpn_lite capacity at equal filters")
    return model
