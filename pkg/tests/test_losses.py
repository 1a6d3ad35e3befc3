"""Loss primitives: fixed-point values, algebraic reductions, gradients."""

import math

import numpy as np
import pytest

from detlab import losses, ops
from detlab.errors import ConfigurationError
from detlab.tensor import Parameter, Tensor

from conftest import make_param, run_gradcheck


class TestSoftmaxCrossEntropy:
    def test_confident_correct_prediction_is_zero(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]]))
        loss = losses.softmax_cross_entropy(logits, np.array([0, 1]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits_give_log_k(self):
        logits = Tensor(np.zeros((4, 5)))
        loss = losses.softmax_cross_entropy(logits, np.array([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(math.log(5), rel=1e-12)

    def test_all_ones_weights_match_unweighted_exactly(self, rng):
        logits = Tensor(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, size=6)
        plain = losses.softmax_cross_entropy(logits, labels)
        weighted = losses.softmax_cross_entropy(logits, labels, class_weights=np.ones(4))
        assert plain.item() == weighted.item()

    def test_weight_length_mismatch(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)))
        with pytest.raises(ConfigurationError, match="length 4"):
            losses.softmax_cross_entropy(logits, np.array([0, 1]), class_weights=np.ones(4))

    def test_nonpositive_weights_rejected(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)))
        with pytest.raises(ConfigurationError, match="strictly positive"):
            losses.softmax_cross_entropy(logits, np.array([0, 1]), class_weights=np.array([1.0, 0.0, 1.0]))

    def test_grad(self, rng):
        logits = make_param(rng, (5, 4), name="logits")
        labels = rng.integers(0, 4, size=5)
        w = rng.uniform(0.5, 2.0, size=4)
        run_gradcheck(lambda: losses.softmax_cross_entropy(logits, labels, class_weights=w), [logits])


class TestSmoothL1:
    def test_identical_boxes_zero(self):
        boxes = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 5.0, 5.0]])
        loss = losses.smooth_l1(Tensor(boxes.copy()), boxes)
        assert loss.item() == 0.0

    def test_linear_region_value(self):
        pred = Tensor(np.array([[2.0, 0.0, 0.0, 0.0]]))
        loss = losses.smooth_l1(pred, np.zeros((1, 4)), beta=1.0, normalizer=1.0)
        assert loss.item() == pytest.approx(1.5)  # |2| - 0.5*1

    def test_grad(self, rng):
        pred = make_param(rng, (6, 4), name="pred")
        target = rng.normal(size=(6, 4))
        # keep |diff| away from the beta kink
        beta = 1.0 / 9.0
        d = pred.data - target
        target = target + np.where(np.abs(np.abs(d) - beta) < 1e-3, 0.01, 0.0)
        run_gradcheck(lambda: losses.smooth_l1(pred, target, beta=beta), [pred])


class TestFocalLoss:
    def test_reduces_to_bce_at_gamma_zero_alpha_one(self, rng):
        logits_data = rng.normal(size=(8, 5))
        targets = (rng.random(size=(8, 5)) < 0.3).astype(np.float64)
        fl = losses.focal_loss(Tensor(logits_data.copy()), targets, alpha=1.0, gamma=0.0, normalizer=8)
        # independent binary cross-entropy computed directly
        p = 1.0 / (1.0 + np.exp(-logits_data))
        bce = -(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert fl.item() == pytest.approx(bce.sum() / 8, rel=1e-10)

    def test_focusing_downweights_easy_examples(self):
        easy = losses.focal_loss(Tensor(np.array([[8.0]])), np.ones((1, 1)), gamma=2.0, normalizer=1)
        hard = losses.focal_loss(Tensor(np.array([[-8.0]])), np.ones((1, 1)), gamma=2.0, normalizer=1)
        assert easy.item() < 1e-6 < hard.item()

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_grad(self, rng, gamma):
        logits = make_param(rng, (4, 3), name="logits")
        targets = (rng.random(size=(4, 3)) < 0.4).astype(np.float64)
        run_gradcheck(
            lambda: losses.focal_loss(logits, targets, alpha=0.25, gamma=gamma, normalizer=4), [logits]
        )


class TestBceWithLogits:
    def test_matches_manual_value(self):
        loss = losses.binary_cross_entropy_with_logits(
            Tensor(np.array([[0.0]])), np.array([[1.0]]), normalizer=1
        )
        assert loss.item() == pytest.approx(math.log(2), rel=1e-12)

    def test_grad(self, rng):
        logits = make_param(rng, (5, 2), name="logits")
        targets = (rng.random(size=(5, 2)) < 0.5).astype(np.float64)
        w = rng.uniform(0.2, 1.5, size=(5, 2))
        run_gradcheck(
            lambda: losses.binary_cross_entropy_with_logits(logits, targets, sample_weights=w, normalizer=3.0),
            [logits],
        )


class TestLossInvariants:
    def test_all_losses_nonnegative(self, rng):
        for _ in range(10):
            logits = Tensor(rng.normal(size=(4, 6)) * 3)
            labels = rng.integers(0, 6, size=4)
            targets = (rng.random(size=(4, 6)) < 0.3).astype(np.float64)
            assert losses.softmax_cross_entropy(logits, labels).item() >= 0
            assert losses.focal_loss(logits, targets).item() >= 0
            assert losses.binary_cross_entropy_with_logits(logits, targets).item() >= 0
            assert losses.smooth_l1(logits, rng.normal(size=(4, 6))).item() >= 0

    def test_finite_on_extreme_logits(self):
        logits = Tensor(np.array([[1e4, -1e4, 0.0]]))
        assert np.isfinite(losses.softmax_cross_entropy(logits, np.array([1])).item())
        assert np.isfinite(losses.focal_loss(logits, np.array([[1.0, 0.0, 0.0]])).item())
