import numpy as np
import pytest
import torch

from conftest import central_difference, max_relative_error
from implant_depth.depthnet import (DepthDecoder, DepthEncoder, DepthNet,
                                    RegressionHead)
from implant_depth.errors import ShapeError


@pytest.fixture(scope="module")
def tiny_net():
    torch.manual_seed(0)
    return DepthNet(widths=(4, 4, 4, 4), decoder_widths=(4, 4, 4),
                    head_width=4)


class TestEncoderShapes:
    def test_desk_scale_example(self):
        torch.manual_seed(0)
        enc = DepthEncoder(widths=(16, 32, 48, 64))
        out = enc(torch.rand(1, 1, 16, 32, 32))
        assert out.shape == (1, 64, 4, 2, 2)

    def test_paper_scale_with_unit_widths(self):
        torch.manual_seed(0)
        enc = DepthEncoder(widths=(1, 1, 1, 1))
        with torch.no_grad():
            out = enc(torch.rand(1, 1, 352, 256, 256))
        assert out.shape == (1, 1, 88, 16, 16)

    def test_random_valid_sizes(self):
        torch.manual_seed(1)
        enc = DepthEncoder(widths=(2, 2, 2, 2))
        rng = np.random.default_rng(0)
        for _ in range(8):
            d = 4 * int(rng.integers(2, 7))
            h = 16 * int(rng.integers(1, 4))
            w = 16 * int(rng.integers(1, 4))
            with torch.no_grad():
                out = enc(torch.rand(1, 1, d, h, w))
            assert out.shape == (1, 2, d // 4, h // 16, w // 16)

    def test_indivisible_shapes_rejected(self):
        enc = DepthEncoder(widths=(2, 2, 2, 2))
        with pytest.raises(ShapeError):
            enc(torch.rand(1, 1, 18, 32, 32))
        with pytest.raises(ShapeError):
            enc(torch.rand(1, 1, 16, 33, 32))

    def test_batch_permutation_equivariance(self):
        torch.manual_seed(2)
        enc = DepthEncoder(widths=(4, 4, 4, 4))
        x = torch.rand(2, 1, 8, 16, 16)
        with torch.no_grad():
            out = enc(x)
            swapped = enc(x.flip(0))
        assert torch.allclose(out.flip(0), swapped, atol=1e-6)


class TestDecoder:
    def test_upsamples_8x(self):
        torch.manual_seed(0)
        dec = DepthDecoder(in_channels=4, widths=(4, 4, 4))
        out = dec(torch.rand(1, 4, 4, 2, 2))
        assert out.shape == (1, 4, 4, 16, 16)

    def test_zero_weights_zero_output(self):
        dec = DepthDecoder(in_channels=2, widths=(2, 2, 2))
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
            out = dec(torch.rand(1, 2, 2, 4, 4))
        assert torch.equal(out, torch.zeros_like(out))

    def test_deterministic(self):
        torch.manual_seed(0)
        dec = DepthDecoder(in_channels=2, widths=(2, 2, 2))
        x = torch.rand(1, 2, 3, 4, 4)
        with torch.no_grad():
            assert torch.equal(dec(x), dec(x))


class TestRegressionHead:
    def test_parameterization(self):
        head = RegressionHead(in_channels=2, width=2)
        with torch.no_grad():
            head.conv1.weight.zero_()
            head.conv1.bias.zero_()
            head.conv2.weight.zero_()
            head.conv2.bias.copy_(torch.tensor([0.25, 0.50]))
            out = head(torch.rand(1, 2, 4, 8, 8), depth=352)
        assert out[0, 0].item() == pytest.approx(88.0)
        assert out[0, 1].item() == pytest.approx(264.0)

    def test_zero_outputs_give_degenerate_interval(self):
        head = RegressionHead(in_channels=2, width=2)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
            out = head(torch.rand(1, 2, 4, 8, 8), depth=100)
        assert out[0, 0].item() == 0.0
        assert out[0, 1].item() == 0.0

    def test_end_never_below_start(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            torch.manual_seed(seed)
            head = RegressionHead(in_channels=3, width=5)
            with torch.no_grad():
                for p in head.parameters():
                    p.copy_(torch.from_numpy(
                        rng.normal(0, 2, p.shape)).float())
                out = head(torch.rand(4, 3, 2, 4, 4), depth=64)
            assert torch.all(out[:, 1] >= out[:, 0])


class TestDepthNet:
    def test_composition_shapes(self, tiny_net):
        x = torch.rand(1, 1, 16, 32, 32)
        pred, feature = tiny_net(x)
        assert pred.shape == (1, 2)
        assert feature.shape == (1, 4, 4, 2, 2)

    def test_initial_prediction_pinned(self):
        torch.manual_seed(5)
        net = DepthNet(widths=(4, 4, 4, 4), decoder_widths=(4, 4, 4),
                       head_width=4)
        with torch.no_grad():
            pred, _ = net(torch.rand(2, 1, 16, 32, 32))
        assert torch.allclose(pred[:, 0], torch.tensor(0.25 * 16))
        assert torch.allclose(pred[:, 1], torch.tensor(0.75 * 16))

    def test_determinism(self, tiny_net):
        x = torch.rand(1, 1, 16, 32, 32)
        with torch.no_grad():
            a, fa = tiny_net(x)
            b, fb = tiny_net(x)
        assert torch.equal(a, b) and torch.equal(fa, fb)

    def test_invariant_end_ge_start_random_weights(self):
        for seed in range(5):
            torch.manual_seed(seed)
            net = DepthNet(widths=(2, 2, 2, 2), decoder_widths=(2, 2, 2),
                           head_width=2)
            with torch.no_grad():
                for p in net.parameters():
                    p.add_(torch.randn_like(p) * 0.5)
                pred, _ = net(torch.rand(2, 1, 8, 16, 16))
            assert torch.all(pred[:, 1] >= pred[:, 0])
            assert torch.all(pred[:, 0] >= 0)

    def test_batch_equivariance(self, tiny_net):
        x = torch.rand(3, 1, 8, 16, 16)
        with torch.no_grad():
            batch_pred, batch_feat = tiny_net(x)
            single = [tiny_net(x[i:i + 1]) for i in range(3)]
        for i in range(3):
            assert torch.allclose(batch_pred[i], single[i][0][0], atol=1e-6)
            assert torch.allclose(batch_feat[i], single[i][1][0], atol=1e-6)

    def test_full_pipeline_gradient_check(self):
        """Interval outputs vs central differences on a miniature float64 net."""
        torch.manual_seed(0)
        net = DepthNet(widths=(4, 4, 4, 4), decoder_widths=(4, 4, 4),
                       head_width=4).double()
        # shake the head off its zero initialization so gradients flow
        with torch.no_grad():
            for p in net.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        x = torch.rand(1, 1, 8, 16, 16, dtype=torch.float64)
        params = dict(net.named_parameters())
        picks = [
            ("encoder.block3d_1.spatial.weight", (0, 0, 0, 1, 1)),
            ("encoder.block3d_2.temporal.weight", (1, 0, 1, 0, 0)),
            ("encoder.block2d_2.conv1.weight", (2, 1, 0, 0)),
            ("decoder.layers.0.weight", (0, 1, 1, 1)),
            ("head.conv1.weight", (0, 0, 0, 0)),
            ("head.conv2.bias", (0,)),
        ]
        for output_idx in (0, 1):
            for name, index in picks:
                param = params[name]

                def forward_scalar(_=None):
                    pred, _f = net(x)
                    return pred[0, output_idx]

                pred = forward_scalar()
                net.zero_grad()
                pred.backward()
                analytic = float(param.grad[index])

                with torch.no_grad():
                    orig = float(param[index])
                    h = 1e-6 * max(1.0, abs(orig))
                    param[index] = orig + h
                    f_plus = float(forward_scalar())
                    param[index] = orig - h
                    f_minus = float(forward_scalar())
                    param[index] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                err = max_relative_error(torch.tensor([analytic]),
                                         torch.tensor([numeric]))
                assert err < 1e-4, (
                    f"{name}[{index}] d(pred[{output_idx}]): "
                    f"analytic={analytic} numeric={numeric} err={err}")
