"""Training losses: interval L1, temporal IoU, and the texture coherence pair.

The texture terms act on the encoder feature F.  Channels are averaged away,
each depth slice goes through a differentiable edge pipeline (Gaussian blur,
Sobel gradients, a smooth squashing of the magnitude into [0, 1]), and the
resulting per-slice edge maps are pushed together for neighboring slices
(consistency) and apart for slices `k` apart (inconsistency, hinged at a
margin).  A hard Canny would block gradients; the classical operator lives
in the metrics module where differentiability does not matter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F_t

from .errors import ShapeError

logger = logging.getLogger(__name__)
_k_warnings: set[tuple[int, int]] = set()

EDGE_EPS = 1e-6


@dataclass(frozen=True)
class TextureStack:
    """Per-depth-slice edge responses in [0, 1] plus the distant-pair stride."""

    matrices: torch.Tensor  # (N, D'', H, W)
    sampling_interval_k: int

    def __post_init__(self):
        if self.matrices.ndim != 4:
            raise ShapeError(
                f"texture stack must be (N, D, H, W), got {tuple(self.matrices.shape)}"
            )
        if self.sampling_interval_k < 1:
            raise ShapeError(f"sampling interval k={self.sampling_interval_k} < 1")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components of one training step.

    l_total recombines the components in a fixed order (reg + tiou + tpl)
    so the decomposition is exact; l_tpl = l_con + l_icon likewise.
    """

    l_reg: float
    l_tiou: float
    l_con: float
    l_icon: float
    l_tpl: float
    l_total: float

    @classmethod
    def from_components(cls, l_reg: float, l_tiou: float, l_con: float,
                        l_icon: float) -> "LossReport":
        l_tpl = l_con + l_icon
        return cls(l_reg=l_reg, l_tiou=l_tiou, l_con=l_con, l_icon=l_icon,
                   l_tpl=l_tpl, l_total=l_reg + l_tiou + l_tpl)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_reg": self.l_reg, "l_tiou": self.l_tiou, "l_con": self.l_con,
            "l_icon": self.l_icon, "l_tpl": self.l_tpl, "l_total": self.l_total,
        }


def _check_interval_batch(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"interval batch must be (N, 2), got {tuple(pred.shape)}")
    if pred.shape != gt.shape:
        raise ShapeError(
            f"pred batch {tuple(pred.shape)} != gt batch {tuple(gt.shape)}"
        )
    if pred.shape[0] < 1:
        raise ShapeError("interval batch is empty")


def regression_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum over the batch of |s - s_gt| + |e - e_gt|."""
    _check_interval_batch(pred, gt)
    return (pred - gt).abs().sum()


def interval_iou_batch(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-item IoU of (N, 2) interval batches; 0 where the union is empty."""
    _check_interval_batch(pred, gt)
    lo = torch.maximum(pred[:, 0], gt[:, 0])
    hi = torch.minimum(pred[:, 1], gt[:, 1])
    intersection = (hi - lo).clamp(min=0.0)
    len_pred = (pred[:, 1] - pred[:, 0]).clamp(min=0.0)
    len_gt = (gt[:, 1] - gt[:, 0]).clamp(min=0.0)
    union = len_pred + len_gt - intersection
    iou = torch.where(union > 0, intersection / union.clamp(min=1e-12),
                      torch.zeros_like(union))
    return iou


def tiou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of 1 - IoU."""
    return (1.0 - interval_iou_batch(pred, gt)).mean()


def _gaussian_kernel1d(sigma: float, dtype: torch.dtype,
                       device: torch.device) -> torch.Tensor:
    radius = max(1, int(3.0 * sigma + 0.5))
    xs = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    kernel = torch.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def soft_edge_map(slices: torch.Tensor, blur_sigma: float = 1.0,
                  gain: float = 4.0) -> torch.Tensor:
    """Differentiable edge response in [0, 1] for a (B, H, W) slice batch.

    Blur, Sobel gradients, then tanh(gain * soft-magnitude).  Constant
    slices map to exactly zero; the pipeline is smooth everywhere.
    """
    b, h, w = slices.shape
    x = slices.reshape(b, 1, h, w)
    dtype, device = x.dtype, x.device
    k1 = _gaussian_kernel1d(blur_sigma, dtype, device)
    radius = (k1.numel() - 1) // 2
    x = F_t.pad(x, (radius, radius, radius, radius), mode="replicate")
    x = F_t.conv2d(x, k1.reshape(1, 1, 1, -1))
    x = F_t.conv2d(x, k1.reshape(1, 1, -1, 1))
    sobel_x = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
                           dtype=dtype, device=device) / 8.0
    x = F_t.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F_t.conv2d(x, sobel_x.reshape(1, 1, 3, 3))
    gy = F_t.conv2d(x, sobel_x.t().reshape(1, 1, 3, 3))
    magnitude = torch.sqrt(gx ** 2 + gy ** 2 + EDGE_EPS ** 2) - EDGE_EPS
    return torch.tanh(gain * magnitude).reshape(b, h, w)


def texture_extract(feature: torch.Tensor, k: int = 10,
                    blur_sigma: float = 1.0, gain: float = 4.0) -> TextureStack:
    """Edge maps of the channel-averaged encoder feature, one per depth slice."""
    if feature.ndim != 5:
        raise ShapeError(
            f"encoder feature must be (N, C, D, H, W), got {tuple(feature.shape)}"
        )
    n, _, d, h, w = feature.shape
    if d < 2:
        raise ShapeError(f"feature depth {d} < 2, no slice pairs to compare")
    reduced = feature.mean(dim=1)  # (N, D, H, W)
    maps = soft_edge_map(reduced.reshape(n * d, h, w), blur_sigma, gain)
    return TextureStack(matrices=maps.reshape(n, d, h, w), sampling_interval_k=k)


def texture_losses(stack: TextureStack,
                   margin: float = 0.1) -> tuple[torch.Tensor, torch.Tensor]:
    """(consistency, inconsistency) pair for a texture stack.

    consistency: mean squared distance between neighboring slice maps.
    inconsistency: hinge max(0, margin - msd) over slice pairs `k` apart,
    0 by definition when the stack is shallower than k (logged once).
    """
    m = stack.matrices
    n, d = m.shape[0], m.shape[1]
    if n < 1 or d < 2:
        raise ShapeError(f"texture stack too small: {tuple(m.shape)}")
    k = stack.sampling_interval_k
    l_con = ((m[:, 1:] - m[:, :-1]) ** 2).mean()
    if d > k:
        msd = ((m[:, k:] - m[:, :-k]) ** 2).mean(dim=(2, 3))
        l_icon = F_t.relu(margin - msd).mean()
    else:
        if (d, k) not in _k_warnings:
            _k_warnings.add((d, k))
            logger.warning(
                "texture stack depth %d <= sampling interval %d; "
                "inconsistency term is 0 by definition", d, k)
        l_icon = m.sum() * 0.0
    return l_con, l_icon


def total_loss(pred: torch.Tensor, gt: torch.Tensor,
               feature: torch.Tensor | None = None, *,
               enable_tiou: bool = True, enable_tpl: bool = True,
               tpl_k: int = 10, tpl_margin: float = 0.1,
               blur_sigma: float = 1.0, gain: float = 4.0
               ) -> tuple[torch.Tensor, LossReport]:
    """Assemble the unit-weight training objective and its report.

    The tiou and texture terms can be switched off for ablations; a switched
    off term is exactly 0 in both the objective and the report.
    """
    reg = regression_loss(pred, gt)
    zero = reg.detach() * 0.0
    tiou = tiou_loss(pred, gt) if enable_tiou else zero
    if enable_tpl:
        if feature is None:
            raise ShapeError("texture loss enabled but no encoder feature given")
        stack = texture_extract(feature, k=tpl_k, blur_sigma=blur_sigma, gain=gain)
        con, icon = texture_losses(stack, margin=tpl_margin)
    else:
        con, icon = zero, zero
    total = reg + tiou + (con + icon)
    report = LossReport.from_components(
        float(reg.detach()), float(tiou.detach()),
        float(con.detach()), float(icon.detach()))
    return total, report
