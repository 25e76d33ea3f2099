"""Depth prediction network: 3D/2D residual encoder, deconv decoder, interval head.

Two factored spatiotemporal residual blocks (each striding 2 along depth and
in-plane) mix context across slices, then two plain 2D residual blocks (each
striding 2 in-plane, applied per slice) refine within-slice texture.  The
encoder output F (N x C x D/4 x H/16 x W/16) is what the texture loss
supervises.  Three deconvolution layers restore 8x spatial resolution, and
the head pools globally and predicts (start, length) fractions of the input
depth, so end >= start holds structurally.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ShapeError

DEPTH_STRIDE = 4
SPATIAL_STRIDE = 16


def _norm3d(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(num_groups=groups, num_channels=channels)


class SpatioTemporalBlock(nn.Module):
    """Factored (2+1)D residual block, stride 2 along all three axes."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.spatial = nn.Conv3d(in_ch, out_ch, (1, 3, 3), stride=(1, 2, 2),
                                 padding=(0, 1, 1), bias=False)
        self.norm1 = _norm3d(out_ch)
        self.temporal = nn.Conv3d(out_ch, out_ch, (3, 1, 1), stride=(2, 1, 1),
                                  padding=(1, 0, 0), bias=False)
        self.norm2 = _norm3d(out_ch)
        self.skip = nn.Conv3d(in_ch, out_ch, 1, stride=2, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        identity = self.skip(x)
        out = self.relu(self.norm1(self.spatial(x)))
        out = self.norm2(self.temporal(out))
        return self.relu(out + identity)


class SliceBlock(nn.Module):
    """2D residual block applied to every depth slice of a 5D tensor."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                               bias=False)
        self.norm1 = _norm3d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm3d(out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = _fold_depth(x, self._forward2d)
        return out

    def _forward2d(self, x2d):
        identity = self.skip(x2d)
        out = self.relu(self.norm1(self.conv1(x2d)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + identity)


def _fold_depth(x: torch.Tensor, fn) -> torch.Tensor:
    """Apply a 2D module per depth slice by folding depth into the batch."""
    n, c, d, h, w = x.shape
    flat = x.permute(0, 2, 1, 3, 4).reshape(n * d, c, h, w)
    out = fn(flat)
    c2, h2, w2 = out.shape[1:]
    return out.reshape(n, d, c2, h2, w2).permute(0, 2, 1, 3, 4)


class DepthEncoder(nn.Module):
    """Two 3D blocks then two per-slice 2D blocks; output is F."""

    def __init__(self, widths: tuple[int, int, int, int] = (16, 32, 48, 64)):
        super().__init__()
        self.block3d_1 = SpatioTemporalBlock(1, widths[0])
        self.block3d_2 = SpatioTemporalBlock(widths[0], widths[1])
        self.block2d_1 = SliceBlock(widths[1], widths[2])
        self.block2d_2 = SliceBlock(widths[2], widths[3])
        self.out_channels = widths[3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, D, H, W) input, got {tuple(x.shape)}")
        _, _, d, h, w = x.shape
        if d % DEPTH_STRIDE != 0:
            raise ShapeError(f"depth {d} not divisible by {DEPTH_STRIDE}")
        if h % SPATIAL_STRIDE != 0 or w % SPATIAL_STRIDE != 0:
            raise ShapeError(
                f"spatial dims {h}x{w} not divisible by {SPATIAL_STRIDE}"
            )
        x = self.block3d_1(x)
        x = self.block3d_2(x)
        x = self.block2d_1(x)
        x = self.block2d_2(x)
        return x


class DepthDecoder(nn.Module):
    """Three per-slice deconvolutions, 8x spatial upsampling in total."""

    def __init__(self, in_channels: int = 64,
                 widths: tuple[int, int, int] = (48, 32, 32)):
        super().__init__()
        layers = []
        in_ch = in_channels
        for w in widths:
            layers.extend([
                nn.ConvTranspose2d(in_ch, w, 4, stride=2, padding=1, bias=False),
                _norm3d(w),
                nn.ReLU(inplace=True),
            ])
            in_ch = w
        self.layers = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.ndim != 5:
            raise ShapeError(f"expected 5D feature, got {tuple(feature.shape)}")
        return _fold_depth(feature, self.layers)


class RegressionHead(nn.Module):
    """Global pooling plus two 1x1 convolutions; outputs (start, end)."""

    def __init__(self, in_channels: int = 32, width: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 1)
        self.conv2 = nn.Conv2d(width, 2, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, feature: torch.Tensor, depth: int) -> torch.Tensor:
        """feature: (N, C, D', H', W'); returns (N, 2) intervals in slices."""
        pooled = feature.mean(dim=(2, 3, 4))[:, :, None, None]
        out = self.relu(self.conv2(self.relu(self.conv1(pooled))))
        start_frac = out[:, 0, 0, 0]
        length_frac = out[:, 1, 0, 0]
        start = start_frac * depth
        end = (start_frac + length_frac) * depth
        return torch.stack([start, end], dim=1)


class DepthNet(nn.Module):
    """Encoder, decoder and head composed; also returns F for the texture loss."""

    def __init__(self, widths: tuple[int, int, int, int] = (16, 32, 48, 64),
                 decoder_widths: tuple[int, int, int] = (48, 32, 32),
                 head_width: int = 32):
        super().__init__()
        self.encoder = DepthEncoder(widths)
        self.decoder = DepthDecoder(self.encoder.out_channels, decoder_widths)
        self.head = RegressionHead(self.decoder.out_channels, head_width)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in",
                                        nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # Zeroing the last layer pins the initial prediction at exactly
        # (0.25 D, 0.75 D), clear of the rectifier's dead zone.
        nn.init.zeros_(self.head.conv2.weight)
        with torch.no_grad():
            self.head.conv2.bias.copy_(torch.tensor([0.25, 0.5]))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (N, 1, D, H, W) -> (intervals (N, 2), encoder feature F)."""
        depth = x.shape[2]
        feature = self.encoder(x)
        decoded = self.decoder(feature)
        intervals = self.head(decoded, depth)
        return intervals, feature
