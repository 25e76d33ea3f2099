"""Implant region detector: conditional heatmap regression on an axial slice.

A residual encoder (stride 32) feeds three deconvolution layers, giving a
stride-4 output grid.  A learned 3-row embedding table stands in for a text
encoder: the condition vector ("left" / "middle" / "right") is broadcast
spatially and concatenated with the last decoder feature map before the
heatmap and offset heads.

The peak of the predicted heatmap, refined by the 2-channel offset map and
scaled by the output stride, is the implant position used to crop the
sub-volume for the depth network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError
from .geometry import crop_windows
from .phantom import CONDITIONS, Volume

OUTPUT_STRIDE = 4
ENCODER_STRIDE = 32


def condition_index(label: str) -> int:
    try:
        return CONDITIONS.index(label)
    except ValueError:
        raise ShapeError(f"unknown condition label {label!r}") from None


@dataclass(frozen=True)
class TextCondition:
    label: str
    embedding: torch.Tensor  # (E,)


@dataclass(frozen=True)
class DetectorOutput:
    heatmap: torch.Tensor  # (N, 1, H_out, W_out), values in [0, 1]
    offsets: torch.Tensor  # (N, 2, H_out, W_out), (d_row, d_col)

    def __post_init__(self):
        if self.heatmap.shape[-2:] != self.offsets.shape[-2:]:
            raise ShapeError(
                f"heatmap {tuple(self.heatmap.shape)} and offsets "
                f"{tuple(self.offsets.shape)} disagree spatially"
            )


def gaussian_target(position: tuple[float, float], sigma: float,
                    shape: tuple[int, int],
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Heatmap exp(-d^2 / (2 sigma^2)) around the rounded position.

    The peak pixel (the rounded position) is exactly 1.
    """
    if sigma <= 0:
        raise ShapeError(f"sigma must be positive, got {sigma}")
    h, w = shape
    row, col = position
    if not (0 <= row < h and 0 <= col < w):
        raise ShapeError(f"position {position} outside heatmap shape {shape}")
    peak_r = int(np.floor(row + 0.5))
    peak_c = int(np.floor(col + 0.5))
    peak_r = min(peak_r, h - 1)
    peak_c = min(peak_c, w - 1)
    rr = torch.arange(h, dtype=dtype).unsqueeze(1)
    cc = torch.arange(w, dtype=dtype).unsqueeze(0)
    d2 = (rr - peak_r) ** 2 + (cc - peak_c) ** 2
    return torch.exp(-d2 / (2.0 * sigma * sigma))


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               alpha: float = 2.0, beta: float = 4.0,
               eps: float = 1e-7) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss for Gaussian heatmaps.

    Peak pixels are where target == 1; the loss is normalized by their
    count (at least 1).
    """
    if pred.shape != target.shape:
        raise ShapeError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )
    pred = pred.clamp(eps, 1.0 - eps)
    peak = target == 1.0
    peak_term = (1.0 - pred) ** alpha * torch.log(pred)
    other_term = (1.0 - target) ** beta * pred ** alpha * torch.log(1.0 - pred)
    loss = -torch.where(peak, peak_term, other_term).sum()
    n_peaks = peak.sum().clamp(min=1)
    return loss / n_peaks.to(loss.dtype)


def offset_l1_loss(offsets: torch.Tensor, gt_offset: tuple[float, float],
                   peak_pixel: tuple[int, int]) -> torch.Tensor:
    """L1 offset loss evaluated at the peak pixel only."""
    if offsets.ndim != 3 or offsets.shape[0] != 2:
        raise ShapeError(f"offsets must be (2, H, W), got {tuple(offsets.shape)}")
    _, h, w = offsets.shape
    row, col = peak_pixel
    if not (0 <= row < h and 0 <= col < w):
        raise ShapeError(f"peak pixel {peak_pixel} outside offset map ({h}, {w})")
    pred = offsets[:, row, col]
    gt = torch.tensor(gt_offset, dtype=offsets.dtype, device=offsets.device)
    return (pred - gt).abs().sum()


def extract_peak(output: DetectorOutput,
                 stride: int = OUTPUT_STRIDE) -> tuple[float, float]:
    """Argmax pixel refined by its offsets, in input-pixel units.

    Ties break toward the smallest row, then the smallest column (the first
    maximum in row-major order).
    """
    heatmap = output.heatmap
    if heatmap.ndim == 4:
        heatmap = heatmap[0, 0]
    elif heatmap.ndim == 3:
        heatmap = heatmap[0]
    offsets = output.offsets
    if offsets.ndim == 4:
        offsets = offsets[0]
    h, w = heatmap.shape
    flat = heatmap.reshape(-1)
    # First maximum in row-major order: smallest row, then smallest column.
    idx = int(torch.nonzero(flat == flat.max(), as_tuple=False)[0, 0])
    row, col = divmod(idx, w)
    d_row = float(offsets[0, row, col])
    d_col = float(offsets[1, row, col])
    return ((row + d_row) * stride, (col + d_col) * stride)


def crop_subvolume(volume: Volume, position: tuple[float, float],
                   crop_hw: int, crop_d: int
                   ) -> tuple[Volume, tuple[int, int, int]]:
    """Sub-volume of crop_d x crop_hw x crop_hw voxels plus its origin.

    The in-plane window is centered on `position` and translated minimally
    to fit; the depth window is centered on D/2.  Pure windowing: the output
    voxels equal the corresponding input voxels.
    """
    depth, height, width = volume.shape
    if crop_hw > min(height, width) or crop_d > depth:
        raise ShapeError(
            f"crop {crop_d}x{crop_hw}x{crop_hw} exceeds volume {volume.shape}"
        )
    d0, r0, c0 = crop_windows(volume.shape, position, crop_hw, crop_d)
    voxels = volume.voxels[d0:d0 + crop_d, r0:r0 + crop_hw, c0:c0 + crop_hw]
    return Volume(voxels=voxels.copy(), spacing_mm=volume.spacing_mm), (d0, r0, c0)


def _norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(num_groups=groups, num_channels=channels)


class ResidualBlock2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                               bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        identity = self.skip(x)
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + identity)


class RegionDetector(nn.Module):
    """Conditional stride-4 heatmap + offset regressor for square slices."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64, 128),
                 embed_dim: int = 32, head_width: int = 32,
                 deconv_widths: tuple[int, int, int] = (64, 48, 32)):
        super().__init__()
        self.embed_dim = embed_dim
        self.stem = nn.Sequential(
            nn.Conv2d(1, widths[0], 7, stride=2, padding=3, bias=False),
            _norm(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = widths[0]
        for w in widths:
            stages.append(ResidualBlock2d(in_ch, w, stride=2))
            stages.append(ResidualBlock2d(w, w))
            in_ch = w
        self.stages = nn.Sequential(*stages)
        deconvs = []
        for w in deconv_widths:
            deconvs.extend([
                nn.ConvTranspose2d(in_ch, w, 4, stride=2, padding=1, bias=False),
                _norm(w),
                nn.ReLU(inplace=True),
            ])
            in_ch = w
        self.deconvs = nn.Sequential(*deconvs)
        self.embedding = nn.Embedding(len(CONDITIONS), embed_dim)
        head_in = in_ch + embed_dim
        self.heat_head = nn.Sequential(
            nn.Conv2d(head_in, head_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(head_width, 1, 1),
        )
        self.offset_head = nn.Sequential(
            nn.Conv2d(head_in, head_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(head_width, 2, 1),
        )
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in",
                                        nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.embedding.weight, std=0.02)
        # Start the heatmap near 0.1 so the focal background term is tame.
        nn.init.constant_(self.heat_head[-1].bias, -2.19)

    def text_condition(self, label: str) -> TextCondition:
        idx = torch.tensor([condition_index(label)])
        with torch.no_grad():
            vec = self.embedding(idx)[0].clone()
        return TextCondition(label=label, embedding=vec)

    def forward(self, image: torch.Tensor,
                condition: torch.Tensor) -> DetectorOutput:
        """image: (N, 1, S, S) with S divisible by 32; condition: (N,) long."""
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, S, S) input, got {tuple(image.shape)}")
        n, _, h, w = image.shape
        if h != w:
            raise ShapeError(f"input must be square, got {h}x{w}")
        if h % ENCODER_STRIDE != 0:
            raise ShapeError(f"input side {h} not divisible by {ENCODER_STRIDE}")
        if condition.shape != (n,):
            raise ShapeError(
                f"condition shape {tuple(condition.shape)} != ({n},)"
            )
        feat = self.deconvs(self.stages(self.stem(image)))
        emb = self.embedding(condition)[:, :, None, None]
        emb = emb.expand(-1, -1, feat.shape[2], feat.shape[3])
        feat = torch.cat([feat, emb], dim=1)
        heat = torch.sigmoid(self.heat_head(feat))
        return DetectorOutput(heatmap=heat, offsets=self.offset_head(feat))
