"""Detector assembly: manifests, capacity ordering, anchors, adapters."""

import numpy as np
import pytest

from detlab import ops
from detlab.errors import ConfigurationError, ContractError
from detlab.models import (
    AdapterSpec,
    AnchorConfig,
    BackboneSpec,
    DecoderSpec,
    DetectorSpec,
    HeadSpec,
    build_detector,
    insert_adapters,
)
from detlab.models.anchors import decode_boxes, encode_boxes, iou_matrix, level_anchors
from detlab.nn import cast_model, set_bn_mode
from detlab.tensor import Tape, Tensor, record

BB = BackboneSpec(stage_channels=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1), num_pretrain_classes=10)


def small_spec(variant="fpn_lite", filters=16, merge_repeats=2, rpn_convs=1, cascade=0,
               kind="two_stage", head_filters=32):
    return DetectorSpec(
        backbone=BB,
        decoder=DecoderSpec(variant=variant, filters=filters, merge_repeats=merge_repeats, levels=4),
        head=HeadSpec(kind=kind, rpn_convs=rpn_convs, cascade_stages=cascade,
                      head_filters=head_filters, num_classes=5),
    )


class TestBuildDeterminism:
    def test_same_spec_same_manifest(self):
        a = build_detector(small_spec(), seed=3)
        b = build_detector(small_spec(), seed=3)
        assert a.manifest() == b.manifest()

    def test_same_seed_identical_weights(self):
        a = build_detector(small_spec(), seed=3)
        b = build_detector(small_spec(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_different_weights(self):
        a = build_detector(small_spec(), seed=3)
        b = build_detector(small_spec(), seed=4)
        assert any(
            pa.data.tobytes() != pb.data.tobytes()
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
            if pa.ndim >= 2
        )

    def test_manifest_text_format(self):
        m = build_detector(small_spec(), seed=0)
        line = m.manifest_text().splitlines()[0]
        name, shape, partition, trainable = line.split()
        assert name == "backbone.stem.weight"
        assert shape == "8x3x3x3"
        assert partition == "backbone"
        assert trainable in ("True", "False")


class TestPartitions:
    def test_partition_completeness(self):
        m = build_detector(small_spec(), seed=0)
        counts = m.partition_counts()
        assert set(counts) == {"backbone", "adapter", "decoder", "head"}
        assert sum(counts.values()) == sum(p.size for p in m.parameters())
        assert counts["backbone"] > 0 and counts["decoder"] > 0 and counts["head"] > 0

    def test_decoder_capacity_ordering_variant(self):
        fpn = build_detector(small_spec("fpn_lite", filters=16), seed=0)
        mm = build_detector(small_spec("multi_merge_lite", filters=16, merge_repeats=3), seed=0)
        assert mm.partition_counts()["decoder"] > fpn.partition_counts()["decoder"]

    def test_decoder_capacity_monotone_in_filters_and_repeats(self):
        base = build_detector(small_spec("multi_merge_lite", filters=16), seed=0).partition_counts()["decoder"]
        wider = build_detector(small_spec("multi_merge_lite", filters=32), seed=0).partition_counts()["decoder"]
        deeper = build_detector(small_spec("multi_merge_lite", filters=16, merge_repeats=3), seed=0).partition_counts()["decoder"]
        assert wider > base and deeper > base

    def test_rpn_convs_difference_is_exactly_one_conv(self):
        one = build_detector(small_spec(rpn_convs=1), seed=0).partition_counts()["head"]
        two = build_detector(small_spec(rpn_convs=2), seed=0).partition_counts()["head"]
        f = 16
        assert two - one == f * f * 9 + f

    def test_incompatible_level_counts_named(self):
        spec = DetectorSpec(
            backbone=BackboneSpec(stage_channels=(8, 16, 32), blocks_per_stage=(1, 1, 1)),
            decoder=DecoderSpec(levels=4),
        )
        with pytest.raises(ConfigurationError, match="4 levels.*emits only 3"):
            spec.validate()


class TestForwardClassify:
    def test_zero_image_zero_head_uniform_softmax(self):
        m = build_detector(small_spec(), seed=1)
        m.backbone.classifier.weight.data[...] = 0
        m.backbone.classifier.bias.data[...] = 0
        logits = m.forward_classify(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
        probs = ops.softmax(logits).data
        np.testing.assert_allclose(probs, 1.0 / 10, atol=1e-7)

    def test_batch_permutation_permutes_rows(self):
        m = build_detector(small_spec(), seed=1)
        set_bn_mode(m, "frozen_stats")
        x = np.random.default_rng(0).random((4, 3, 32, 32), dtype=np.float32)
        perm = [2, 0, 3, 1]
        a = m.forward_classify(Tensor(x)).data
        b = m.forward_classify(Tensor(x[perm])).data
        np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)

    def test_wrong_channel_count(self):
        m = build_detector(small_spec(), seed=1)
        with pytest.raises(ContractError, match="images"):
            m.forward_classify(Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32)))


class TestForwardDetect:
    def test_anchor_count_per_level(self):
        m = build_detector(small_spec(), seed=1)
        out = m.forward_detect(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
        cfg = m.spec.head.anchors
        per_cell = len(cfg.scales) * len(cfg.aspect_ratios)
        expected = [(64 // s) ** 2 * per_cell for s in (4, 8, 16, 32)]
        assert [a.shape[0] for a in out.anchors] == expected

    def test_divisibility_contract(self):
        m = build_detector(small_spec(), seed=1)
        with pytest.raises(ContractError, match="divisible by the largest stride 32"):
            m.forward_detect(Tensor(np.zeros((1, 3, 48, 48), dtype=np.float32)))

    def test_cascade_zero_equals_single_stage_structure(self):
        plain = build_detector(small_spec(cascade=0), seed=1)
        out = plain.forward_detect(Tensor(np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)))
        assert len(out.stage_outputs) == 1
        assert plain.spec.head.stage_ious == (0.5,)

    def test_cascade_stages_run_in_order(self):
        m = build_detector(small_spec(cascade=3), seed=1)
        assert m.spec.head.stage_ious == (0.5, 0.6, 0.7)
        out = m.forward_detect(Tensor(np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)))
        assert len(out.stage_outputs) == 3

    def test_single_stage_outputs(self):
        m = build_detector(small_spec(kind="single_stage"), seed=1)
        out = m.forward_detect(Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32)))
        total = sum(a.shape[0] for a in out.anchors)
        assert out.cls_flat.shape == (2 * total, 5)
        assert out.box_flat.shape == (2 * total, 4)

    def test_detect_returns_per_image_results(self):
        m = build_detector(small_spec(), seed=1)
        res = m.detect(Tensor(np.random.default_rng(3).random((2, 3, 64, 64), dtype=np.float32)))
        assert len(res) == 2
        boxes, scores, classes = res[0]
        assert boxes.shape[1] == 4 and len(scores) == len(classes) == len(boxes)
        if len(scores) > 1:
            assert all(scores[i] >= scores[i + 1] for i in range(len(scores) - 1))


class TestAdapters:
    def _frozen_model(self, dtype=np.float64):
        m = build_detector(small_spec(), seed=2)
        for _, p in m.named_parameters():
            if p.partition == "backbone":
                p.trainable = False
        set_bn_mode(m, "frozen_stats")
        cast_model(m, dtype)
        return m

    def test_insertion_on_trainable_backbone_rejected(self):
        m = build_detector(small_spec(), seed=2)
        with pytest.raises(ConfigurationError, match="frozen"):
            insert_adapters(m, AdapterSpec(enabled=True))

    def test_zero_init_identity_exact_f64(self):
        rng = np.random.default_rng(5)
        images = Tensor(rng.random((2, 3, 64, 64)).astype(np.float64))
        base = self._frozen_model()
        ref = base.detect(images)
        adapted = self._frozen_model()
        insert_adapters(adapted, AdapterSpec(enabled=True, bottleneck_ratio=0.25), seed=9)
        cast_model(adapted, np.float64)
        got = adapted.detect(images)
        for (b0, s0, c0), (b1, s1, c1) in zip(ref, got):
            np.testing.assert_array_equal(b0, b1)
            np.testing.assert_array_equal(s0, s1)
            np.testing.assert_array_equal(c0, c1)

    def test_adapter_partition_size_bounds(self):
        m = self._frozen_model(np.float32)
        insert_adapters(m, AdapterSpec(enabled=True, bottleneck_ratio=0.25), seed=9)
        counts = m.partition_counts()
        assert 0 < counts["adapter"] < counts["backbone"]

    def test_adapter_params_trainable_and_tagged(self):
        m = self._frozen_model(np.float32)
        insert_adapters(m, AdapterSpec(enabled=True), seed=9)
        adapter_params = [(n, p) for n, p in m.named_parameters() if p.partition == "adapter"]
        assert adapter_params
        assert all(p.trainable for _, p in adapter_params)
        assert all(".adapter_s" in n for n, _ in adapter_params)

    def test_double_insertion_rejected(self):
        m = self._frozen_model(np.float32)
        insert_adapters(m, AdapterSpec(enabled=True), seed=9)
        with pytest.raises(ConfigurationError, match="already"):
            insert_adapters(m, AdapterSpec(enabled=True), seed=9)


class TestAnchors:
    def test_level_anchor_layout(self):
        cfg = AnchorConfig(scales=(1.0,), aspect_ratios=(1.0,), base_scale=2.0)
        a = level_anchors(2, 3, 8, cfg)
        assert a.shape == (6, 1 * 4)[:1] + (4,)
        # first anchor centered at (4, 4) with size 16
        np.testing.assert_allclose(a[0], [4 - 8, 4 - 8, 4 + 8, 4 + 8])
        # row-major: second anchor moves in x
        np.testing.assert_allclose(a[1][0], 12 - 8)

    def test_aspect_ratio_preserves_area(self):
        cfg = AnchorConfig(scales=(1.0,), aspect_ratios=(0.5, 1.0, 2.0), base_scale=4.0)
        a = level_anchors(1, 1, 8, cfg)
        areas = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
        np.testing.assert_allclose(areas, areas[0], rtol=1e-5)

    def test_encode_decode_roundtrip(self, rng):
        ref = np.abs(rng.normal(size=(20, 2))) * 10 + 1
        xy = rng.normal(size=(20, 2)) * 5
        ref_boxes = np.concatenate([xy, xy + ref], axis=1)
        tgt = ref_boxes + rng.normal(size=(20, 4))
        tgt[:, 2:] = np.maximum(tgt[:, 2:], tgt[:, :2] + 0.5)
        deltas = encode_boxes(ref_boxes, tgt)
        back = decode_boxes(ref_boxes, deltas)
        np.testing.assert_allclose(back, tgt, atol=1e-4)

    def test_iou_matrix_basics(self):
        a = np.array([[0, 0, 2, 2]], dtype=np.float64)
        b = np.array([[0, 0, 2, 2], [1, 1, 3, 3], [5, 5, 6, 6]], dtype=np.float64)
        m = iou_matrix(a, b)
        np.testing.assert_allclose(m[0], [1.0, 1.0 / 7.0, 0.0])
