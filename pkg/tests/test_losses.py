import math

import numpy as np
import pytest
import torch

from implant_depth.errors import ShapeError
from implant_depth.geometry import Interval, interval_iou
from implant_depth.losses import (LossReport, TextureStack,
                                  interval_iou_batch, regression_loss,
                                  soft_edge_map, texture_extract,
                                  texture_losses, tiou_loss, total_loss)


def iv(pairs):
    return torch.from_numpy(np.asarray(pairs, dtype=np.float64))


class TestRegressionLoss:
    def test_identity_is_zero(self):
        assert float(regression_loss(iv([[10, 20]]), iv([[10, 20]]))) == 0.0

    def test_hand_value(self):
        # |10-12| + |20-18| = 4
        assert float(regression_loss(iv([[10, 20]]), iv([[12, 18]]))) == 4.0

    def test_batch_sums(self):
        pred = iv([[10, 20], [0, 10]])
        gt = iv([[12, 18], [3, 13]])
        assert float(regression_loss(pred, gt)) == pytest.approx(4.0 + 6.0)

    def test_non_negative_zero_iff_equal(self, rng):
        for _ in range(20):
            pred = torch.from_numpy(rng.uniform(0, 50, (3, 2)))
            gt = torch.from_numpy(rng.uniform(0, 50, (3, 2)))
            value = float(regression_loss(pred, gt))
            assert value >= 0
            assert (value == 0) == bool(torch.equal(pred, gt))

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            regression_loss(iv([[1, 2]]), iv([[1, 2], [3, 4]]))


class TestTiouLoss:
    def test_identity(self):
        assert float(tiou_loss(iv([[10, 20]]), iv([[10, 20]]))) == 0.0

    def test_disjoint(self):
        assert float(tiou_loss(iv([[0, 10]]), iv([[20, 30]]))) == 1.0

    def test_partial(self):
        loss = float(tiou_loss(iv([[10, 20]]), iv([[15, 25]])))
        assert loss == pytest.approx(2.0 / 3.0, rel=1e-9)

    def test_batch_mean(self):
        loss = float(tiou_loss(iv([[10, 20], [0, 10]]),
                               iv([[10, 20], [20, 30]])))
        assert loss == pytest.approx(0.5)

    def test_range(self, rng):
        for _ in range(50):
            pred = torch.from_numpy(np.sort(rng.uniform(0, 40, (4, 2)), axis=1))
            gt = torch.from_numpy(np.sort(rng.uniform(0, 40, (4, 2)), axis=1))
            assert 0.0 <= float(tiou_loss(pred, gt)) <= 1.0

    def test_matches_scalar_implementation(self, rng):
        for _ in range(100):
            a = np.sort(rng.uniform(0, 400, 2))
            b = np.sort(rng.uniform(0, 400, 2))
            batch = float(interval_iou_batch(iv([a]), iv([b]))[0])
            scalar = interval_iou(Interval(*a), Interval(*b))
            assert batch == pytest.approx(scalar, abs=1e-9)


class TestSoftEdgeMap:
    def test_constant_slice_has_zero_response(self):
        x = torch.full((2, 12, 12), 0.37)
        out = soft_edge_map(x)
        assert torch.equal(out, torch.zeros_like(out))

    def test_vertical_step_localizes(self):
        x = torch.zeros(1, 16, 16)
        x[0, :, 8:] = 1.0
        out = soft_edge_map(x)[0]
        near = out[:, 6:10].mean()
        far = out[:, :3].mean()
        assert float(near) > 0.5
        assert float(far) < 0.05

    def test_range(self, rng):
        x = torch.from_numpy(rng.uniform(0, 1, (3, 10, 10)))
        out = soft_edge_map(x)
        assert float(out.min()) >= 0.0
        assert float(out.max()) <= 1.0


class TestTextureExtract:
    def test_shapes_and_channel_mean(self):
        f = torch.rand(2, 3, 6, 8, 8)
        stack = texture_extract(f, k=10)
        assert stack.matrices.shape == (2, 6, 8, 8)
        assert stack.sampling_interval_k == 10

    def test_depth_too_small(self):
        with pytest.raises(ShapeError):
            texture_extract(torch.rand(1, 2, 1, 8, 8))

    def test_constant_feature_zero_maps(self):
        f = torch.full((1, 4, 5, 8, 8), 0.2)
        stack = texture_extract(f)
        assert torch.equal(stack.matrices, torch.zeros_like(stack.matrices))


class TestTextureLosses:
    def test_identical_matrices(self):
        m = torch.rand(1, 14, 6, 6).expand(1, 14, 6, 6).clone()
        m[:] = m[:, :1]
        stack = TextureStack(matrices=m, sampling_interval_k=10)
        l_con, l_icon = texture_losses(stack, margin=0.1)
        assert float(l_con) == 0.0
        assert float(l_icon) == pytest.approx(0.1)

    def test_two_slice_hand_case(self):
        m = torch.stack([torch.zeros(6, 6), torch.ones(6, 6)])[None]
        stack = TextureStack(matrices=m, sampling_interval_k=10)
        l_con, l_icon = texture_losses(stack, margin=0.1)
        assert float(l_con) == pytest.approx(1.0)
        assert float(l_icon) == 0.0  # no pair at distance 10

    def test_saturated_hinge(self, rng):
        m = torch.from_numpy(rng.uniform(0, 1, (1, 13, 6, 6))).float()
        m[:, 11:] = m[:, :2] + 10.0  # distant pairs very far apart
        stack = TextureStack(matrices=m, sampling_interval_k=11)
        _, l_icon = texture_losses(stack, margin=0.1)
        assert float(l_icon) == 0.0

    def test_icon_zero_when_too_shallow(self):
        m = torch.rand(1, 5, 4, 4)
        stack = TextureStack(matrices=m, sampling_interval_k=10)
        l_con, l_icon = texture_losses(stack, margin=0.1)
        assert float(l_icon) == 0.0
        assert float(l_con) > 0.0

    def test_icon_monotone_in_distance(self):
        base = torch.rand(1, 12, 5, 5)
        deltas = torch.rand(1, 12, 5, 5) * 0.05
        stack_near = TextureStack(matrices=base, sampling_interval_k=10)
        scaled = base.clone()
        scaled[:, 10:] = base[:, :2] + 3.0 * (base[:, 10:] - base[:, :2])
        stack_far = TextureStack(matrices=scaled, sampling_interval_k=10)
        del deltas
        _, icon_near = texture_losses(stack_near, margin=0.25)
        _, icon_far = texture_losses(stack_far, margin=0.25)
        assert float(icon_far) <= float(icon_near)

    def test_non_negative(self, rng):
        for _ in range(10):
            m = torch.from_numpy(rng.uniform(0, 1, (2, 12, 4, 4))).float()
            stack = TextureStack(matrices=m, sampling_interval_k=3)
            l_con, l_icon = texture_losses(stack, margin=0.1)
            assert float(l_con) >= 0.0 and float(l_icon) >= 0.0


class TestTotalLoss:
    def test_component_sum_exact(self):
        torch.manual_seed(0)
        pred = iv([[10, 20]]).float()
        gt = iv([[12, 19]]).float()
        feature = torch.rand(1, 2, 12, 6, 6)
        total, report = total_loss(pred, gt, feature, tpl_k=10)
        assert report.l_total == report.l_reg + report.l_tiou + report.l_tpl
        assert report.l_tpl == report.l_con + report.l_icon
        assert float(total) == pytest.approx(report.l_total, rel=1e-6)

    def test_hand_assembled_total(self):
        # components (4.0, 2/3, 0.05) -> 4.716666...
        report = LossReport.from_components(4.0, 2.0 / 3.0, 0.05, 0.0)
        assert report.l_total == pytest.approx(4.0 + 2.0 / 3.0 + 0.05)

    def test_all_zero(self):
        report = LossReport.from_components(0.0, 0.0, 0.0, 0.0)
        assert report.l_total == 0.0

    def test_ablation_switches(self):
        torch.manual_seed(0)
        pred = iv([[10, 20]]).float()
        gt = iv([[12, 19]]).float()
        feature = torch.rand(1, 2, 12, 6, 6)
        _, base = total_loss(pred, gt, feature)
        _, no_tpl = total_loss(pred, gt, feature, enable_tpl=False)
        assert no_tpl.l_tpl == 0.0
        assert no_tpl.l_total == no_tpl.l_reg + no_tpl.l_tiou
        assert no_tpl.l_reg == base.l_reg
        _, no_tiou = total_loss(pred, gt, feature, enable_tiou=False)
        assert no_tiou.l_tiou == 0.0
        assert no_tiou.l_total == no_tiou.l_reg + no_tiou.l_tpl

    def test_tpl_needs_feature(self):
        with pytest.raises(ShapeError):
            total_loss(iv([[1, 2]]).float(), iv([[1, 2]]).float(), None)

    def test_report_dict_round_trip(self):
        report = LossReport.from_components(1.0, 0.5, 0.25, 0.125)
        d = report.as_dict()
        assert d["l_total"] == report.l_total
        assert set(d) == {"l_reg", "l_tiou", "l_con", "l_icon", "l_tpl",
                          "l_total"}
