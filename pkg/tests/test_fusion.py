import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vicflow import tensor as T
from vicflow.flow import FeatureMap
from vicflow.fusion import (N_HEAD, AnchorConfig, DetectionBox, Fusion, Head, assign_targets, bev_iou,
                            detect, detection_loss, encode_box, fold_yaw, iou_matrix, nms, warp_to_vehicle)
from vicflow.geometry import Pose
from vicflow.optim import Adam
from vicflow.pillars import BevGrid
from vicflow.scene import INFRA, VEHICLE, GroundTruthBox

FG = BevGrid().downsample(2, 32)  # 36 x 36 feature grid, 1 m cells
ANC = AnchorConfig()


def fmap(arr, frame=INFRA):
    return FeatureMap(T.tensor(arr), frame, 0.0)


def gt(cx, cy, yaw=0.0, w=1.7, l=4.1, h=1.5, oid=0):
    return GroundTruthBox(oid, cx, cy, -2.56 + h / 2, w, l, h, yaw)


class TestWarp:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 36, 36))
        p = Pose.from_planar(5, 2, 0.3)
        out = warp_to_vehicle(fmap(x), p, p, FG)
        np.testing.assert_allclose(out.tensor.data, x, atol=1e-6)
        assert out.frame_id == VEHICLE

    def test_one_cell_translation(self):
        x = np.random.default_rng(1).uniform(1, 2, size=(2, 36, 36))
        infra = Pose.from_planar(0, 0, 0)
        vehicle = Pose.from_planar(1.0, 0, 0)  # one 1 m cell ahead of the infra frame
        out = warp_to_vehicle(fmap(x), infra, vehicle, FG).tensor.data
        np.testing.assert_allclose(out[:, :, :-1], x[:, :, 1:], atol=1e-6)
        assert not out[:, :, -1].any()

    def test_quarter_turn_delta(self):
        # infra frame rotated +90 deg about a point; a delta at infra cell centre (xi, yi)
        # sits at vehicle coordinates R(90) (xi, yi) + t
        x = np.zeros((1, 36, 36))
        row, col = 20, 10
        x[0, row, col] = 1.0
        infra = Pose.from_planar(18.0, 0.0, math.pi / 2)
        vehicle = Pose.identity()
        xi, yi = col + 0.5, -18 + row + 0.5
        xv, yv = -yi + 18.0, xi + 0.0
        t_row, t_col = int(math.floor(yv + 18)), int(math.floor(xv))
        out = warp_to_vehicle(fmap(x), infra, vehicle, FG).tensor.data
        assert out[0, t_row, t_col] == pytest.approx(1.0, abs=1e-6)
        assert out.sum() == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
    def test_mass_conservation(self, tx, ty, yaw):
        x = np.zeros((1, 36, 36))
        x[0, 16:20, 16:20] = np.random.default_rng(0).uniform(0.5, 1, (4, 4))
        # rotate about the grid centre (18, 0) and shift a little; the patch stays inside
        centre = Pose.from_planar(18, 0, 0)
        infra = Pose.from_planar(tx, ty, 0).compose(centre).compose(Pose.from_planar(0, 0, yaw)).compose(centre.inverse())
        out = warp_to_vehicle(fmap(x), infra, Pose.identity(), FG)
        total = out.tensor.data.sum()
        assert abs(total - x.sum()) <= 0.02 * x.sum()

    def test_gradient_passes(self):
        x = T.tensor(np.random.default_rng(2).normal(size=(2, 36, 36)), requires_grad=True)
        out = warp_to_vehicle(FeatureMap(x, INFRA, 0.0), Pose.from_planar(0, 0, 0.1), Pose.identity(), FG)
        T.backward(T.sum_all(out.tensor))
        assert np.abs(x.grad).sum() > 0


class TestFuse:
    @pytest.fixture
    def fusion(self):
        return Fusion(rng=np.random.default_rng(0), dtype=np.float64)

    def test_shape(self, fusion):
        a = fmap(np.ones((32, 36, 36)), VEHICLE)
        assert fusion(a, a).shape == (32, 36, 36)

    def test_zero_infra_convention(self, fusion):
        v = np.random.default_rng(0).normal(size=(32, 36, 36))
        a = FeatureMap(T.tensor(v, dtype=np.float64), VEHICLE, 0.0)
        z = FeatureMap(T.tensor(np.zeros_like(v), dtype=np.float64), VEHICLE, 0.0)
        out = fusion(a, z).tensor.data
        ref = fusion.block(T.tensor(np.concatenate([v, np.zeros_like(v)]), dtype=np.float64)).data
        np.testing.assert_array_equal(out, ref)

    def test_shape_mismatch(self, fusion):
        with pytest.raises(T.DimensionError):
            fusion(fmap(np.ones((32, 36, 36))), fmap(np.ones((32, 18, 18))))

    def test_grad_both_inputs(self):
        rng = np.random.default_rng(1)
        f = Fusion(channels=2, rng=rng, dtype=np.float64)
        f.block.bias.data[:] = 0.5  # keep relu active
        a = T.Tensor(rng.uniform(0.1, 1, (2, 4, 4)), requires_grad=True)
        b = T.Tensor(rng.uniform(0.1, 1, (2, 4, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4, 4))
        fn = lambda: T.sum_all(T.mul(f(FeatureMap(a, VEHICLE, 0), FeatureMap(b, VEHICLE, 0)).tensor, T.Tensor(w)))
        T.backward(fn())
        assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0
        assert T.relative_error(a.grad, T.numerical_grad(fn, a)) < 1e-4
        assert T.relative_error(b.grad, T.numerical_grad(fn, b)) < 1e-4


def _logits_for(boxes, objectness=8.0):
    out = np.zeros((N_HEAD, 36, 36))
    out[0] = -10.0
    for b in boxes:
        col, row = int(math.floor(b.cx)), int(math.floor(b.cy + 18))
        ax, ay = col + 0.5, -18 + row + 0.5
        out[0, row, col] = objectness
        out[1:, row, col] = encode_box(b, ax, ay, ANC)
    return out


class TestDetect:
    def test_zero_logits_empty(self):
        assert detect(np.zeros((N_HEAD, 36, 36)), FG, ANC, score_threshold=0.5) == []

    def test_hand_set_box(self):
        # one box at (10.3, -4.6): cell row 13, col 10, anchor centre (10.5, -4.5)
        out = np.zeros((N_HEAD, 36, 36))
        out[0] = -10.0
        out[0, 13, 10] = 5.0
        d = ANC.diag
        out[1, 13, 10] = (10.3 - 10.5) / d
        out[2, 13, 10] = (-4.6 + 4.5) / d
        out[8, 13, 10] = 1.0
        dets = detect(out, FG, ANC)
        assert len(dets) == 1
        assert abs(dets[0].cx - 10.3) <= 0.5 and abs(dets[0].cy + 4.6) <= 0.5
        assert dets[0].w == pytest.approx(ANC.w) and dets[0].score == pytest.approx(1 / (1 + math.exp(-5)))

    def test_nms_identical(self):
        b = DetectionBox(5, 0, -1.78, 1.6, 3.9, 1.56, 0.0, 0.9)
        assert nms([b, b], 0.5) == [b]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nms_antichain(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [DetectionBox(*rng.uniform(0, 10, 2), -1.78, *rng.uniform(1, 4, 3), rng.uniform(-3, 3), rng.uniform(0, 1))
                 for _ in range(30)]
        kept = nms(boxes, 0.3)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert bev_iou(kept[i], kept[j]) <= 0.3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_encode_decode_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        b = gt(rng.uniform(1, 35), rng.uniform(-17, 17), yaw=float(rng.choice([0.0, math.pi])),
               w=rng.uniform(1.5, 1.9), l=rng.uniform(3.6, 4.6), h=rng.uniform(1.4, 1.7))
        dets = detect(_logits_for([b]), FG, ANC)
        assert len(dets) == 1
        d = dets[0]
        assert abs(d.cx - b.cx) <= 0.5 and abs(d.cy - b.cy) <= 0.5
        for got, want in ((d.w, b.w), (d.l, b.l), (d.h, b.h)):
            assert abs(got / want - 1) < 0.01
        assert abs(fold_yaw(d.yaw - b.yaw)) < 1e-6


class TestTargetsAndLoss:
    def test_iou_basics(self):
        a = np.array([[0, 0, 2, 2.0]])
        assert iou_matrix(a, a)[0, 0] == 1.0
        assert iou_matrix(a, np.array([[1, 0, 3, 2.0]]))[0, 0] == pytest.approx(1 / 3)

    def test_assignment_has_positive(self):
        tg = assign_targets([gt(10.2, 3.3)], FG, ANC)
        assert tg.positive.sum() >= 1
        assert not np.any(tg.cls_weight[tg.positive] == 0)

    def test_perfect_regression_zero(self):
        boxes = [gt(10.2, 3.3), gt(25.0, -7.0, yaw=math.pi)]
        tg = assign_targets(boxes, FG, ANC)
        out = np.zeros((N_HEAD, 36 * 36))
        out[1:] = tg.reg
        head = T.tensor(out.reshape(N_HEAD, 36, 36), dtype=np.float64)
        full = detection_loss(head, boxes, FG, ANC, cls_weight=0.0)
        assert full.item() == 0.0

    def test_no_gt_is_pure_negative(self):
        x = np.random.default_rng(0).normal(size=(N_HEAD, 36, 36))
        loss = detection_loss(T.tensor(x, dtype=np.float64), [], FG, ANC).item()
        p = 1 / (1 + np.exp(-x[0]))
        ref = np.sum(-(0.75) * p ** 2 * np.log(1 - p))
        assert loss == pytest.approx(ref, rel=1e-9)

    @pytest.mark.slow
    def test_overfit_single_frame(self):
        rng = np.random.default_rng(0)
        head = Head(rng=rng)
        feat = FeatureMap(T.tensor(rng.uniform(0, 1, (32, 36, 36))), VEHICLE, 0.0)
        boxes = [gt(10.2, 3.3), gt(25.0, -7.0, yaw=math.pi), gt(5.5, 10.5)]
        tg = assign_targets(boxes, FG, ANC)
        # a bias-only move from the 0.01 prior needs larger steps than the training lr
        opt = Adam(head.parameters(), lr=1e-2)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            loss = detection_loss(head(feat), boxes, FG, ANC, targets=tg)
            losses.append(loss.item())
            T.backward(loss)
            opt.step()
        assert losses[-1] < 0.1 * losses[0]
