"""Interval arithmetic and crop-window geometry, all in voxel coordinates.

An Interval is a pair of continuous slice indices (start, end).  Raw network
output may produce degenerate intervals, so validity (start < end) is checked
where an interval is consumed, never at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ShapeError


@dataclass(frozen=True)
class Interval:
    """Continuous [start, end) range of slice indices."""

    start: float
    end: float

    def length(self) -> float:
        return max(0.0, self.end - self.start)

    def is_valid(self) -> bool:
        return (
            math.isfinite(self.start)
            and math.isfinite(self.end)
            and self.start < self.end
        )

    def shifted(self, offset: float) -> "Interval":
        return Interval(self.start + offset, self.end + offset)


def interval_iou(a: Interval, b: Interval) -> float:
    """Overlap-over-union of two 1D intervals.

    Degenerate operands (zero or negative length) contribute zero length;
    if the union is empty the result is defined as 0.
    """
    intersection = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length() + b.length() - intersection
    if union <= 0.0:
        return 0.0
    return intersection / union


def centered_window(center: float, size: int, limit: int) -> int:
    """Origin of a window of `size` cells inside [0, limit).

    The window is centered on `center` (half-up rounding), then translated
    by the minimal amount needed to lie fully inside the bounds.
    """
    if size > limit:
        raise ShapeError(f"window size {size} exceeds axis length {limit}")
    origin = int(math.floor(center + 0.5)) - size // 2
    return min(max(origin, 0), limit - size)


def crop_windows(
    volume_shape: tuple[int, int, int],
    position: tuple[float, float],
    crop_hw: int,
    crop_d: int,
) -> tuple[int, int, int]:
    """Origins (d0, r0, c0) of a crop_d x crop_hw x crop_hw crop.

    The in-plane window is centered on `position`; the depth window is
    centered on D/2.  Both are clamped to the volume bounds.
    """
    depth, height, width = volume_shape
    d0 = centered_window(depth / 2.0, crop_d, depth)
    r0 = centered_window(position[0], crop_hw, height)
    c0 = centered_window(position[1], crop_hw, width)
    return d0, r0, c0
