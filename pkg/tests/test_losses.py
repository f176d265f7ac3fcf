"""Heatmap regression losses: L2, intensity-weighted variant, joint supervision."""

import math

import numpy as np
import pytest
import torch

from farnet import (
    ConfigError,
    Frame,
    FrameTransform,
    HeatmapGrid,
    LandmarkSet,
    LossConfig,
    ParameterError,
    ShapeError,
    coarse_fine_loss,
    encode_heatmap_stack,
    ewc_loss,
    ewc_loss_grad,
    l2_heatmap_loss,
    map_coordinates,
)


def oracle_weighted_loss(pred, gt, alpha):
    """Scalar triple-loop reference."""
    total, count = 0.0, 0
    for c in range(pred.shape[0]):
        for y in range(pred.shape[1]):
            for x in range(pred.shape[2]):
                yv, pv = gt[c, y, x], pred[c, y, x]
                total += (yv - pv) ** 2 * alpha**yv
                count += 1
    return total / count


class TestL2:
    def test_zero_for_identical_stacks(self):
        data = np.random.default_rng(0).random((2, 5, 5))
        assert l2_heatmap_loss(data, data.copy()) == 0.0

    def test_single_pixel_unit_error(self):
        assert l2_heatmap_loss(np.zeros((1, 1, 1)), np.ones((1, 1, 1))) == 1.0

    def test_half_error_on_one_of_four_pixels(self):
        pred, gt = np.zeros((1, 2, 2)), np.zeros((1, 2, 2))
        gt[0, 0, 0] = 0.5
        assert l2_heatmap_loss(pred, gt) == 0.0625

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            l2_heatmap_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestWeightedLoss:
    def test_matches_triple_loop_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            pred = rng.random((2, 6, 5))
            gt = rng.random((2, 6, 5))
            got = ewc_loss(pred, gt, alpha=40.0)
            assert got == pytest.approx(oracle_weighted_loss(pred, gt, 40.0), rel=1e-12)

    def test_single_pixel_examples(self):
        pred, gt = np.zeros((1, 1, 1)), np.ones((1, 1, 1))
        assert ewc_loss(pred, gt, alpha=40.0) == 40.0
        pred[0, 0, 0], gt[0, 0, 0] = 0.3, 0.5
        expected = 0.04 * math.sqrt(40.0)
        assert ewc_loss(pred, gt, alpha=40.0) == pytest.approx(expected, abs=1e-9)

    def test_alpha_one_reduces_to_l2_bitwise(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pred = rng.random((3, 8, 8))
            gt = rng.random((3, 8, 8))
            assert ewc_loss(pred, gt, alpha=1.0) == l2_heatmap_loss(pred, gt)

    def test_weight_grows_with_target_intensity(self):
        losses = []
        for y in (0.0, 0.25, 0.5, 0.75, 1.0):
            gt = np.full((1, 1, 1), y)
            pred = gt - 0.1
            losses.append(ewc_loss(pred, gt, alpha=40.0))
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_weight_ignores_prediction_intensity(self):
        gt = np.full((1, 1, 1), 0.2)
        low = ewc_loss(np.full((1, 1, 1), 0.1), gt, alpha=40.0)
        high = ewc_loss(np.full((1, 1, 1), 0.3), gt, alpha=40.0)
        assert low == pytest.approx(high, rel=1e-12)

    def test_nonnegative_and_zero_only_at_equality(self):
        rng = np.random.default_rng(3)
        pred = rng.random((2, 4, 4))
        gt = pred.copy()
        assert ewc_loss(pred, gt, alpha=40.0) == 0.0
        gt[1, 2, 3] += 1e-3
        assert ewc_loss(pred, gt, alpha=40.0) > 0.0

    def test_joint_pixel_permutation_invariance(self):
        rng = np.random.default_rng(4)
        pred = rng.random((1, 4, 8))
        gt = rng.random((1, 4, 8))
        perm = rng.permutation(32)
        loss = ewc_loss(pred, gt, alpha=40.0)
        shuffled = ewc_loss(
            pred.ravel()[perm].reshape(1, 4, 8), gt.ravel()[perm].reshape(1, 4, 8), 40.0
        )
        assert shuffled == pytest.approx(loss, rel=1e-12)

    def test_alpha_below_one_rejected(self):
        with pytest.raises(ParameterError):
            ewc_loss(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), alpha=0.5)
        with pytest.raises(ParameterError):
            ewc_loss_grad(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), alpha=0.99)

    def test_torch_inputs_stay_torch(self):
        pred = torch.rand(2, 4, 4)
        gt = torch.rand(2, 4, 4)
        out = ewc_loss(pred, gt, alpha=40.0)
        assert isinstance(out, torch.Tensor) and out.ndim == 0


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(5)
        step = 1e-4
        worst = 0.0
        for _ in range(3):
            pred = rng.random((3, 8, 8))
            gt = rng.random((3, 8, 8))
            analytic = ewc_loss_grad(pred, gt, alpha=40.0)
            for idx in [(0, 0, 0), (1, 4, 4), (2, 7, 7), (0, 3, 6)]:
                plus, minus = pred.copy(), pred.copy()
                plus[idx] += step
                minus[idx] -= step
                numeric = (ewc_loss(plus, gt, 40.0) - ewc_loss(minus, gt, 40.0)) / (2 * step)
                worst = max(worst, abs(numeric - analytic[idx]) / max(abs(numeric), 1e-12))
        assert worst < 1e-4

    def test_matches_autograd(self):
        rng = np.random.default_rng(6)
        pred_np = rng.random((2, 5, 5))
        gt_np = rng.random((2, 5, 5))
        pred = torch.tensor(pred_np, requires_grad=True)
        loss = ewc_loss(pred, torch.tensor(gt_np), alpha=40.0)
        (grad,) = torch.autograd.grad(loss, pred)
        np.testing.assert_allclose(
            grad.numpy(), ewc_loss_grad(pred_np, gt_np, 40.0), rtol=1e-9, atol=1e-12
        )

    def test_gradient_zero_at_equality(self):
        data = np.random.default_rng(7).random((1, 3, 3))
        assert np.all(ewc_loss_grad(data, data.copy(), alpha=40.0) == 0.0)


def encode_pair(landmarks, net_size, sigma):
    """Ground-truth stacks for both heads, landmarks given in the input frame."""
    w, h = net_size
    fine_grid = HeatmapGrid(w, h, stride_wrt_input=1)
    coarse_grid = HeatmapGrid(w // 2, h // 2, stride_wrt_input=2)
    to_coarse = FrameTransform((w, h), (w // 2, h // 2), Frame.NET_INPUT, Frame.HEATMAP_L1)
    fine = encode_heatmap_stack(landmarks.with_frame(Frame.NET_INPUT), fine_grid, sigma)
    coarse = encode_heatmap_stack(map_coordinates(landmarks, to_coarse), coarse_grid, sigma)
    return coarse, fine


class TestJointLoss:
    sigma = 4.0

    def landmarks(self):
        return LandmarkSet(np.array([[10.5, 20.0], [25.0, 7.25]]), Frame.NET_INPUT)

    def test_perfect_predictions_give_zero(self):
        lms = self.landmarks()
        coarse, fine = encode_pair(lms, (32, 32), self.sigma)
        out = coarse_fine_loss(coarse.data, fine.data, lms, self.sigma, LossConfig())
        assert out.total == 0.0 and out.coarse == 0.0 and out.fine == 0.0

    def test_total_is_weighted_sum_of_heads(self):
        rng = np.random.default_rng(8)
        lms = self.landmarks()
        coarse_pred = rng.random((2, 16, 16))
        fine_pred = rng.random((2, 32, 32))
        cfg = LossConfig(head_weights=(0.7, 2.0))
        out = coarse_fine_loss(coarse_pred, fine_pred, lms, self.sigma, cfg)
        assert out.total == pytest.approx(0.7 * out.coarse + 2.0 * out.fine, rel=1e-12)

    def test_head_terms_match_independent_encoding(self):
        rng = np.random.default_rng(9)
        lms = self.landmarks()
        coarse_pred = rng.random((2, 16, 16))
        fine_pred = rng.random((2, 32, 32))
        out = coarse_fine_loss(coarse_pred, fine_pred, lms, self.sigma, LossConfig())
        coarse_gt, fine_gt = encode_pair(lms, (32, 32), self.sigma)
        assert out.coarse == pytest.approx(
            oracle_weighted_loss(coarse_pred, coarse_gt.data, 40.0), rel=1e-12
        )
        assert out.fine == pytest.approx(
            oracle_weighted_loss(fine_pred, fine_gt.data, 40.0), rel=1e-12
        )

    def test_zero_coarse_weight_total_equals_fine(self):
        rng = np.random.default_rng(10)
        lms = self.landmarks()
        coarse_pred = rng.random((2, 16, 16))
        fine_pred = rng.random((2, 32, 32))
        cfg = LossConfig(head_weights=(0.0, 1.0))
        out = coarse_fine_loss(coarse_pred, fine_pred, lms, self.sigma, cfg)
        assert out.total == out.fine  # exact, not approximate

    def test_zero_coarse_weight_blocks_coarse_gradient(self):
        lms = self.landmarks()
        coarse_pred = torch.rand(2, 16, 16, requires_grad=True)
        fine_pred = torch.rand(2, 32, 32, requires_grad=True)
        cfg = LossConfig(head_weights=(0.0, 1.0))
        out = coarse_fine_loss(coarse_pred, fine_pred, lms, self.sigma, cfg)
        out.total.backward()
        assert torch.all(coarse_pred.grad == 0)
        assert torch.any(fine_pred.grad != 0)

    def test_missing_fine_head_contributes_zero(self):
        rng = np.random.default_rng(11)
        lms = self.landmarks()
        coarse_pred = rng.random((2, 16, 16))
        cfg = LossConfig(head_weights=(0.5, 1.0))
        out = coarse_fine_loss(coarse_pred, None, lms, self.sigma, cfg)
        assert out.fine == 0.0
        assert out.total == pytest.approx(0.5 * out.coarse, rel=1e-12)

    def test_batched_predictions_with_per_sample_landmarks(self):
        rng = np.random.default_rng(12)
        sets = [
            LandmarkSet(rng.uniform(2, 29, size=(2, 2)), Frame.NET_INPUT) for _ in range(3)
        ]
        coarse_pred = rng.random((3, 2, 16, 16))
        fine_pred = rng.random((3, 2, 32, 32))
        out = coarse_fine_loss(coarse_pred, fine_pred, sets, self.sigma, LossConfig())
        singles_c = [
            coarse_fine_loss(coarse_pred[i], fine_pred[i], sets[i], self.sigma, LossConfig())
            for i in range(3)
        ]
        # mean over the batch equals the mean of per-sample head losses
        assert out.coarse == pytest.approx(np.mean([s.coarse for s in singles_c]), rel=1e-12)
        assert out.fine == pytest.approx(np.mean([s.fine for s in singles_c]), rel=1e-12)

    def test_wrong_fine_stride_rejected(self):
        lms = self.landmarks()
        with pytest.raises(ConfigError):
            coarse_fine_loss(
                np.zeros((2, 16, 16)), np.zeros((2, 30, 30)), lms, self.sigma, LossConfig()
            )

    def test_batch_count_mismatch_rejected(self):
        lms = [self.landmarks(), self.landmarks()]
        with pytest.raises(ShapeError):
            coarse_fine_loss(
                np.zeros((3, 2, 16, 16)), np.zeros((3, 2, 32, 32)), lms, self.sigma, LossConfig()
            )

    def test_torch_path_keeps_graph(self):
        lms = self.landmarks()
        coarse_pred = torch.rand(2, 16, 16, requires_grad=True)
        fine_pred = torch.rand(2, 32, 32, requires_grad=True)
        out = coarse_fine_loss(coarse_pred, fine_pred, lms, self.sigma, LossConfig())
        assert isinstance(out.total, torch.Tensor)
        out.total.backward()
        assert torch.isfinite(coarse_pred.grad).all()
        assert torch.isfinite(fine_pred.grad).all()

    def test_l2_kind_drops_the_intensity_weight(self):
        rng = np.random.default_rng(13)
        lms = self.landmarks()
        coarse_pred = rng.random((2, 16, 16))
        fine_pred = rng.random((2, 32, 32))
        out = coarse_fine_loss(
            coarse_pred, fine_pred, lms, self.sigma, LossConfig(loss_kind="l2")
        )
        coarse_gt, fine_gt = encode_pair(lms, (32, 32), self.sigma)
        assert out.coarse == pytest.approx(
            l2_heatmap_loss(coarse_pred, coarse_gt.data), rel=1e-12
        )
        assert out.fine == pytest.approx(l2_heatmap_loss(fine_pred, fine_gt.data), rel=1e-12)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.alpha == 40.0
        assert cfg.loss_kind == "ewc"
        assert cfg.head_weights == (1.0, 1.0)

    def test_validation(self):
        with pytest.raises(ParameterError):
            LossConfig(alpha=0.5)
        with pytest.raises(ConfigError):
            LossConfig(loss_kind="huber")
        with pytest.raises(ConfigError):
            LossConfig(head_weights=(0.0, 0.0))
        with pytest.raises(ConfigError):
            LossConfig(head_weights=(-1.0, 1.0))
        with pytest.raises(ConfigError):
            LossConfig(reduction="sum")
