"""Bounding boxes for inset regions, read off the canvas marker channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIZE = 8


class NoInsetRegion(RuntimeError):
    """The marker channel has no pixel above threshold."""


@dataclass(frozen=True)
class BBox:
    row: int
    col: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"box extent must be positive, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.row + self.height

    @property
    def right(self) -> int:
        return self.col + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return (self.row + (self.height - 1) / 2.0, self.col + (self.width - 1) / 2.0)

    def inside(self, height: int, width: int) -> bool:
        return self.row >= 0 and self.col >= 0 and self.bottom <= height and self.right <= width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row, self.col, self.height, self.width)


def _expand(lo: int, hi: int, size: int, extent: int) -> tuple[int, int]:
    """Grow [lo, hi) symmetrically to at least ``size`` and clip to [0, extent)."""
    n = hi - lo
    if n < size:
        grow = size - n
        lo -= grow // 2
        hi += grow - grow // 2
    if lo < 0:
        hi, lo = hi - lo, 0
    if hi > extent:
        lo, hi = max(0, lo - (hi - extent)), extent
    return lo, hi


def detect_bbox(canvas, threshold: float = 0.5, marker: int = 0, min_size: int = MIN_SIZE) -> BBox:
    """Tight box around marker pixels above ``threshold``.

    ``canvas`` is a (C, H, W) array or Tensor whose channels after the three
    colour channels are markers; ``marker`` selects which one.
    """
    data = canvas.data if hasattr(canvas, "data") and not isinstance(canvas, np.ndarray) else canvas
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[0] <= 3 + marker:
        raise ValueError(f"canvas of shape {data.shape} has no marker channel {marker}")
    _, h, w = data.shape
    mask = data[3 + marker] > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise NoInsetRegion(f"no inset region: marker {marker} never exceeds {threshold}")
    r0, r1 = _expand(int(rows[0]), int(rows[-1]) + 1, min_size, h)
    c0, c1 = _expand(int(cols[0]), int(cols[-1]) + 1, min_size, w)
    if r1 - r0 < min_size or c1 - c0 < min_size:
        raise NoInsetRegion(f"image {h}x{w} cannot hold a {min_size}px inset region")
    return BBox(r0, c0, r1 - r0, c1 - c0)


def detect_all(canvas, n_markers: int, threshold: float = 0.5) -> list[BBox]:
    return [detect_bbox(canvas, threshold, marker=k) for k in range(n_markers)]


def lerp_bbox(b_start: BBox, b_end: BBox, f: float) -> BBox:
    """Componentwise linear interpolation, rounded half up."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"interpolation factor must lie in [0, 1], got {f}")
    if f == 0.0:
        return b_start
    if f == 1.0:
        return b_end
    a = np.array(b_start.as_tuple(), dtype=np.float64)
    b = np.array(b_end.as_tuple(), dtype=np.float64)
    v = a + f * (b - a)
    r = np.floor(v + 0.5).astype(int)
    return BBox(*(int(x) for x in r))
