"""Detection heads.

TwoStageHead: a region-proposal tower shared across pyramid levels followed
by one or more region heads (cascade refinement with rising IoU thresholds).
SingleStageHead: a dense anchor head trained with focal loss.

Internal class labels are 0 = background, c + 1 = dataset class c; the
detector converts back at the postprocessing boundary. Proposal selection,
target matching, and sampling are numpy-side (gradients never flow through
box coordinates), while every scored output is an autodiff tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import losses, metering, ops
from ..nn import Conv2d, Linear, Module
from ..evalmetrics.boxes import nms_xyxy
from .anchors import decode_boxes, encode_boxes, iou_matrix

ROI_SIZE = 7
PROPOSALS_TRAIN = 512
PROPOSALS_EVAL = 256
PRE_NMS_TOPK = 1000
PROPOSAL_NMS_IOU = 0.7
ROI_SAMPLES = 64
ROI_POS_FRACTION = 0.25
RPN_SAMPLES = 256
RPN_POS_FRACTION = 0.5
RPN_POS_IOU = 0.6
RPN_NEG_IOU = 0.3
SS_POS_IOU = 0.5
SS_NEG_IOU = 0.4


@dataclass
class DetectOutputs:
    """Raw forward results of a detection pass.

    ``rpn_obj`` / ``rpn_deltas`` are flattened autodiff tensors over all
    anchors ([N*A, 1] and [N*A, 4]); ``level_shapes`` preserves the per-level
    layout. ``proposals`` holds per-image xyxy arrays. ``stage_outputs``
    holds one entry per region-head stage with class logits and box deltas
    (plus sampled targets at train time). ``losses`` is populated only in
    training mode.
    """

    kind: str = "two_stage"
    level_shapes: list = field(default_factory=list)
    anchors: list = field(default_factory=list)
    rpn_obj: object = None
    rpn_deltas: object = None
    proposals: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    cls_flat: object = None
    box_flat: object = None
    losses: dict = field(default_factory=dict)


def _flatten_level(t, per_anchor):
    """[N, A*k, H, W] -> [N, H*W*A, k] in (row, col, anchor) order per image."""
    n, ak, h, w = t.shape
    a = ak // per_anchor
    r = ops.reshape(t, (n, a, per_anchor, h, w))
    r = ops.permute(r, (0, 3, 4, 1, 2))
    return ops.reshape(r, (n, h * w * a, per_anchor))


def _flatten_levels(parts):
    """Concatenate per-level [N, HWA_l, k] maps into [N*A_total, k] rows.

    Rows are image-major over the full anchor set, matching the order of the
    concatenated per-level anchor arrays within each image.
    """
    cat = parts[0] if len(parts) == 1 else ops.concat_channels(parts)
    n, a_tot, k = cat.shape
    return ops.reshape(cat, (n * a_tot, k))


def match_anchors(anchors, gt_boxes, pos_thr, neg_thr, force_best):
    """Labels (1 pos / 0 neg / -1 ignore) and matched gt index per anchor."""
    n = anchors.shape[0]
    if gt_boxes.shape[0] == 0:
        return np.zeros(n, dtype=np.int8), np.zeros(n, dtype=np.int64)
    iou = iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels = np.full(n, -1, dtype=np.int8)
    labels[best_iou < neg_thr] = 0
    labels[best_iou >= pos_thr] = 1
    if force_best:
        per_gt_best = iou.argmax(axis=0)
        for g, a in enumerate(per_gt_best):
            if iou[a, g] > 0:
                labels[a] = 1
                best_gt[a] = g
    return labels, best_gt


def _sample_balanced(labels, quota, pos_fraction, rng):
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(quota * pos_fraction))
    if len(pos) > n_pos:
        pos = pos[rng.permutation(len(pos))[:n_pos]]
    n_neg = min(len(neg), quota - len(pos))
    if len(neg) > n_neg:
        neg = neg[rng.permutation(len(neg))[:n_neg]]
    return pos, neg


def roi_index_grid(rois, stride, feat_h, feat_w):
    """Integer (ys, xs) sampling grids for fixed-size region pooling."""
    r = ROI_SIZE
    steps = (np.arange(r, dtype=np.float64) + 0.5) / r
    xs = rois[:, 0:1] + steps[None, :] * (rois[:, 2:3] - rois[:, 0:1])
    ys = rois[:, 1:2] + steps[None, :] * (rois[:, 3:4] - rois[:, 1:2])
    ix = np.clip(np.floor(xs / stride), 0, feat_w - 1).astype(np.int64)
    iy = np.clip(np.floor(ys / stride), 0, feat_h - 1).astype(np.int64)
    return (
        np.broadcast_to(iy[:, :, None], (len(rois), r, r)).copy(),
        np.broadcast_to(ix[:, None, :], (len(rois), r, r)).copy(),
    )


class RegionStage(Module):
    def __init__(self, in_dim, head_filters, num_classes):
        super().__init__()
        self.fc1 = Linear(in_dim, head_filters, "head")
        self.fc2 = Linear(head_filters, head_filters, "head")
        self.cls = Linear(head_filters, num_classes + 1, "head")
        self.box = Linear(head_filters, 4, "head")

    def __call__(self, roi_feats):
        h = ops.relu(self.fc1(roi_feats))
        h = ops.relu(self.fc2(h))
        return self.cls(h), self.box(h)


class TwoStageHead(Module):
    def __init__(self, spec, filters, strides):
        super().__init__()
        self.spec = spec
        self.strides = strides
        self.class_weights = None  # set during balanced second-stage tuning
        a = spec.anchors.per_cell
        for i in range(spec.rpn_convs):
            setattr(self, f"rpn_conv{i}", Conv2d(filters, filters, 3, "head"))
        self.rpn_obj = Conv2d(filters, a, 1, "head", padding=0)
        self.rpn_box = Conv2d(filters, 4 * a, 1, "head", padding=0)
        in_dim = filters * ROI_SIZE * ROI_SIZE
        for s in range(len(spec.stage_ious)):
            setattr(self, f"stage{s}", RegionStage(in_dim, spec.head_filters, spec.num_classes))

    def region_stages(self):
        return [getattr(self, f"stage{s}") for s in range(len(self.spec.stage_ious))]

    def final_classifier(self):
        """The classifier linear that balanced second-stage tuning retrains."""
        return self.region_stages()[-1].cls

    def _rpn_forward(self, features):
        objs, deltas, shapes = [], [], []
        for f in features:
            h = f
            for i in range(self.spec.rpn_convs):
                h = ops.relu(getattr(self, f"rpn_conv{i}")(h))
            objs.append(_flatten_level(self.rpn_obj(h), 1))
            deltas.append(_flatten_level(self.rpn_box(h), 4))
            shapes.append((f.shape[2], f.shape[3]))
        return _flatten_levels(objs), _flatten_levels(deltas), shapes

    def _propose(self, obj_flat, deltas_flat, anchors_cat, n_images, hw, cap):
        """Per-image proposal boxes from detached RPN outputs."""
        a_tot = anchors_cat.shape[0]
        scores = obj_flat.data.reshape(n_images, a_tot)
        deltas = deltas_flat.data.reshape(n_images, a_tot, 4)
        proposals = []
        for i in range(n_images):
            s = scores[i]
            k = min(PRE_NMS_TOPK, a_tot)
            top = np.argsort(-s, kind="stable")[:k]
            boxes = decode_boxes(anchors_cat[top], deltas[i][top], clip_hw=hw)
            wh_ok = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
            boxes, top = boxes[wh_ok], top[wh_ok]
            keep = nms_xyxy(boxes, s[top], PROPOSAL_NMS_IOU)[:cap]
            proposals.append(boxes[keep])
        return proposals

    def forward(self, features, anchors, hw, train, gt=None, rng=None, trace_rois=None):
        """Full two-stage pass; computes losses when gt is provided."""
        with metering.scope("head"):
            out = DetectOutputs(kind="two_stage", anchors=anchors)
            n = features[0].shape[0]
            out.rpn_obj, out.rpn_deltas, out.level_shapes = self._rpn_forward(features)
            anchors_cat = np.concatenate(anchors, axis=0)
            if trace_rois is not None:
                dummy = np.tile(
                    np.asarray([[0.0, 0.0, hw[1], hw[0]]], dtype=np.float32), (trace_rois, 1)
                )
                out.proposals = [dummy.copy() for _ in range(n)]
                self._eval_stages(out, features, hw, n)
                return out
            cap = PROPOSALS_TRAIN if train else PROPOSALS_EVAL
            out.proposals = self._propose(out.rpn_obj, out.rpn_deltas, anchors_cat, n, hw, cap)
            if train and gt is not None:
                self._train_losses(out, features, anchors_cat, n, hw, gt, rng)
            else:
                self._eval_stages(out, features, hw, n)
        return out

    def _rpn_losses(self, out, anchors_cat, n, gt, rng):
        a_tot = anchors_cat.shape[0]
        idx_cls, tgt_cls, idx_box, tgt_box = [], [], [], []
        for i in range(n):
            labels, best = match_anchors(anchors_cat, gt[i]["boxes"], RPN_POS_IOU, RPN_NEG_IOU, True)
            pos, neg = _sample_balanced(labels, RPN_SAMPLES, RPN_POS_FRACTION, rng)
            base = i * a_tot
            idx_cls.append(base + np.concatenate([pos, neg]))
            tgt_cls.append(np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]))
            if len(pos):
                idx_box.append(base + pos)
                tgt_box.append(encode_boxes(anchors_cat[pos], gt[i]["boxes"][best[pos]]))
        idx_cls = np.concatenate(idx_cls)
        tgt_cls = np.concatenate(tgt_cls)[:, None]
        cls_loss = losses.binary_cross_entropy_with_logits(
            ops.take_rows(out.rpn_obj, idx_cls), tgt_cls, normalizer=max(1, len(idx_cls))
        )
        if idx_box:
            # normalized by the full sample count, not positives, which keeps
            # the box term commensurate with the classification term
            idx_box = np.concatenate(idx_box)
            box_loss = losses.smooth_l1(
                ops.take_rows(out.rpn_deltas, idx_box),
                np.concatenate(tgt_box, axis=0),
                normalizer=max(1, len(idx_cls)),
            )
        else:
            box_loss = ops.mul_scalar(ops.sum_all(out.rpn_deltas), 0.0)
        return cls_loss, box_loss

    def _sample_rois(self, rois_per_image, gt, iou_thr, rng):
        """Sampled rois with class labels and box targets for one stage."""
        all_rois, batch_idx, labels, box_targets = [], [], [], []
        for i, rois in enumerate(rois_per_image):
            gt_boxes, gt_labels = gt[i]["boxes"], gt[i]["labels"]
            if gt_boxes.shape[0] and rois.shape[0]:
                iou = iou_matrix(rois, gt_boxes)
                best = iou.argmax(axis=1)
                best_iou = iou[np.arange(len(rois)), best]
            else:
                best = np.zeros(len(rois), dtype=np.int64)
                best_iou = np.zeros(len(rois))
            lab = np.where(best_iou >= iou_thr, 1, 0).astype(np.int8)
            pos, neg = _sample_balanced(lab, ROI_SAMPLES, ROI_POS_FRACTION, rng)
            sel = np.concatenate([pos, neg])
            if not len(sel):
                continue
            all_rois.append(rois[sel])
            batch_idx.append(np.full(len(sel), i, dtype=np.int64))
            lab_out = np.zeros(len(sel), dtype=np.int64)
            lab_out[: len(pos)] = gt_labels[best[pos]] + 1
            labels.append(lab_out)
            tgt = np.zeros((len(sel), 4), dtype=np.float32)
            if len(pos):
                tgt[: len(pos)] = encode_boxes(rois[pos], gt_boxes[best[pos]])
            box_targets.append(tgt)
        return (
            np.concatenate(all_rois) if all_rois else np.zeros((0, 4), dtype=np.float32),
            np.concatenate(batch_idx) if batch_idx else np.zeros(0, dtype=np.int64),
            np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
            np.concatenate(box_targets) if box_targets else np.zeros((0, 4), dtype=np.float32),
        )

    def _extract(self, features, rois, batch_idx):
        f = features[0]
        ys, xs = roi_index_grid(rois, self.strides[0], f.shape[2], f.shape[3])
        feats = ops.crop_gather(f, batch_idx, ys, xs)
        return ops.reshape(feats, (rois.shape[0], -1))

    def _train_losses(self, out, features, anchors_cat, n, hw, gt, rng):
        rpn_cls, rpn_box = self._rpn_losses(out, anchors_cat, n, gt, rng)
        out.losses = {"rpn_cls": rpn_cls, "rpn_box": rpn_box}
        # seed stage 0 with proposals plus ground truth for early stability
        rois_per_image = [
            np.concatenate([out.proposals[i], gt[i]["boxes"]]).astype(np.float32)
            if gt[i]["boxes"].shape[0]
            else out.proposals[i]
            for i in range(n)
        ]
        for s, (stage, iou_thr) in enumerate(zip(self.region_stages(), self.spec.stage_ious)):
            rois, batch_idx, labels, box_tgt = self._sample_rois(rois_per_image, gt, iou_thr, rng)
            if rois.shape[0] == 0:
                break
            cls_logits, box_deltas = stage(self._extract(features, rois, batch_idx))
            out.stage_outputs.append(
                {"rois": rois, "batch_idx": batch_idx, "labels": labels,
                 "cls_logits": cls_logits, "box_deltas": box_deltas}
            )
            out.losses[f"stage{s}_cls"] = losses.softmax_cross_entropy(
                cls_logits, labels, class_weights=self.class_weights
            )
            fg = np.flatnonzero(labels > 0)
            if len(fg):
                out.losses[f"stage{s}_box"] = losses.smooth_l1(
                    ops.take_rows(box_deltas, fg), box_tgt[fg], normalizer=max(1, len(labels))
                )
            if s + 1 < len(self.spec.stage_ious):
                refined = decode_boxes(rois, box_deltas.data, clip_hw=hw)
                rois_per_image = [refined[batch_idx == i] for i in range(n)]

    def _eval_stages(self, out, features, hw, n):
        rois_per_image = out.proposals
        for stage in self.region_stages():
            rois = np.concatenate([r for r in rois_per_image if len(r)], axis=0) if any(
                len(r) for r in rois_per_image
            ) else np.zeros((0, 4), dtype=np.float32)
            batch_idx = np.concatenate(
                [np.full(len(r), i, dtype=np.int64) for i, r in enumerate(rois_per_image)]
            ) if rois.shape[0] else np.zeros(0, dtype=np.int64)
            if rois.shape[0] == 0:
                out.stage_outputs.append({"rois": rois, "batch_idx": batch_idx, "cls_logits": None, "box_deltas": None})
                return
            cls_logits, box_deltas = stage(self._extract(features, rois, batch_idx))
            out.stage_outputs.append(
                {"rois": rois, "batch_idx": batch_idx, "cls_logits": cls_logits, "box_deltas": box_deltas}
            )
            refined = decode_boxes(rois, box_deltas.data, clip_hw=hw)
            rois_per_image = [refined[batch_idx == i] for i in range(n)]


class SingleStageHead(Module):
    TOWER_CONVS = 2
    SCORE_BIAS_PRIOR = 0.01

    def __init__(self, spec, filters, strides):
        super().__init__()
        self.spec = spec
        self.strides = strides
        a = spec.anchors.per_cell
        for i in range(self.TOWER_CONVS):
            setattr(self, f"tower{i}", Conv2d(filters, filters, 3, "head"))
        prior = -float(np.log((1.0 - self.SCORE_BIAS_PRIOR) / self.SCORE_BIAS_PRIOR))
        self.cls = Conv2d(filters, a * spec.num_classes, 1, "head", padding=0, bias_const=prior)
        self.box = Conv2d(filters, 4 * a, 1, "head", padding=0)

    def final_classifier(self):
        return self.cls

    def forward(self, features, anchors, hw, train, gt=None, rng=None, trace_rois=None):
        with metering.scope("head"):
            out = DetectOutputs(kind="single_stage", anchors=anchors)
            k = self.spec.num_classes
            cls_parts, box_parts = [], []
            for f in features:
                h = f
                for i in range(self.TOWER_CONVS):
                    h = ops.relu(getattr(self, f"tower{i}")(h))
                cls_parts.append(_flatten_level(self.cls(h), k))
                box_parts.append(_flatten_level(self.box(h), 4))
                out.level_shapes.append((f.shape[2], f.shape[3]))
            out.cls_flat = _flatten_levels(cls_parts)
            out.box_flat = _flatten_levels(box_parts)
            if train and gt is not None:
                self._train_losses(out, np.concatenate(anchors, axis=0), features[0].shape[0], gt, rng)
        return out

    def _train_losses(self, out, anchors_cat, n, gt, rng):
        a_tot = anchors_cat.shape[0]
        k = self.spec.num_classes
        idx_keep, onehots, idx_box, tgt_box, n_pos = [], [], [], [], 0
        for i in range(n):
            labels, best = match_anchors(anchors_cat, gt[i]["boxes"], SS_POS_IOU, SS_NEG_IOU, True)
            keep = np.flatnonzero(labels >= 0)
            oh = np.zeros((len(keep), k), dtype=np.float32)
            pos_mask = labels[keep] == 1
            if pos_mask.any():
                cls_ids = gt[i]["labels"][best[keep[pos_mask]]]
                oh[np.flatnonzero(pos_mask), cls_ids] = 1.0
            idx_keep.append(i * a_tot + keep)
            onehots.append(oh)
            pos = np.flatnonzero(labels == 1)
            n_pos += len(pos)
            if len(pos):
                idx_box.append(i * a_tot + pos)
                tgt_box.append(encode_boxes(anchors_cat[pos], gt[i]["boxes"][best[pos]]))
        idx_keep = np.concatenate(idx_keep)
        norm = max(1, n_pos)
        out.losses["focal_cls"] = losses.focal_loss(
            ops.take_rows(out.cls_flat, idx_keep), np.concatenate(onehots, axis=0), normalizer=norm
        )
        if idx_box:
            out.losses["box"] = losses.smooth_l1(
                ops.take_rows(out.box_flat, np.concatenate(idx_box)),
                np.concatenate(tgt_box, axis=0),
                normalizer=max(4 * n_pos, 1),
            )
