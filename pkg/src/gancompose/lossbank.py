"""Loss terms for matching an inset to its canvas region.

All losses take (C, H, W) Tensors and return scalar Tensors recorded on the
active tape.  Weight arguments follow the table in ``composer.LossWeights``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .detector import BBox
from .diffcore import Tensor

BORDER_WIDTH = 8
APPEARANCE_RESOLUTION = 64


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Pixel selection relative to one or more anchor boxes.

    ``interior`` and ``border`` split the anchor box into an inner block and a
    frame of ``width`` pixels; ``exterior`` is everything outside the anchors.
    """
    kind: str
    bbox: object = None
    width: int = BORDER_WIDTH

    def __post_init__(self):
        if self.kind not in ("interior", "exterior", "border", "full"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind != "full" and self.bbox is None:
            raise ValueError(f"{self.kind} region needs an anchor box")

    @property
    def boxes(self) -> tuple:
        if self.bbox is None:
            return ()
        return tuple(self.bbox) if isinstance(self.bbox, (list, tuple)) else (self.bbox,)

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width))
        if self.kind == "full":
            m[:] = 1.0
            return m
        for b in self.boxes:
            if not b.inside(height, width):
                raise ValueError(f"region anchor {b} outside {height}x{width} image")
        if self.kind == "exterior":
            m[:] = 1.0
            for b in self.boxes:
                m[b.row:b.bottom, b.col:b.right] = 0.0
            return m
        x = self.width
        for b in self.boxes:
            if b.height <= 2 * x or b.width <= 2 * x:
                raise ValueError(f"box {b} too small for a {x}px border split")
            if self.kind == "interior":
                m[b.row + x:b.bottom - x, b.col + x:b.right - x] = 1.0
            else:
                m[b.row:b.bottom, b.col:b.right] = 1.0
                m[b.row + x:b.bottom - x, b.col + x:b.right - x] = 0.0
        return m


def full_box(img) -> BBox:
    _, h, w = np.shape(img.data if isinstance(img, Tensor) else img)
    return BBox(0, 0, h, w)


# ---------------------------------------------------------------------------
# border extraction


_border_cache: dict = {}


def border_indices(height: int, width: int, x: int) -> np.ndarray:
    """Flat pixel indices of the width-``x`` frame: top rows, bottom rows, left, right."""
    key = (height, width, x)
    if key in _border_cache:
        return _border_cache[key]
    if x < 1 or height <= 2 * x - 1 or width <= 2 * x - 1 or 2 * x > min(height, width):
        raise ValueError(f"image {height}x{width} too small for a border of width {x}")
    idx = np.arange(height * width).reshape(height, width)
    parts = [idx[:x].ravel(), idx[height - x:].ravel(),
             idx[x:height - x, :x].ravel(), idx[x:height - x, width - x:].ravel()]
    out = np.concatenate(parts)
    _border_cache[key] = out
    return out


def border_region(img, x: int) -> Tensor:
    """Pixels of the width-``x`` frame as a (C, n) Tensor, n = 2x(h+w) - 4x^2."""
    img = dc.as_tensor(img)
    c, h, w = img.shape
    idx = border_indices(h, w, x)
    flat = img.data.reshape(c, h * w)

    def backward(g):
        out = np.zeros((c, h * w))
        out[:, idx] = g
        return (out.reshape(c, h, w),)

    return dc._record("border_region", flat[:, idx], (img,), backward)


# ---------------------------------------------------------------------------
# perceptual features


_MEMO_SIZE = 16
_feature_memo: OrderedDict = OrderedDict()


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen random conv pyramid standing in for a learned perceptual network."""
    seed: int = 7
    widths: tuple = (8, 12, 16)
    in_channels: int = 3
    norm_eps: float = 1e-3

    @cached_property
    def weights(self) -> list:
        rng = np.random.default_rng([self.seed, 0xFEA7])
        ws, c_in = [], self.in_channels
        for c_out in self.widths:
            ws.append(rng.normal(size=(c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in)))
            c_in = c_out
        return ws

    def features(self, img) -> list:
        """Channel-normalised activations after each stage.

        Results for constant (non-differentiable) inputs are memoised, since
        optimization loops compare against the same reference every step.
        """
        x = dc.as_tensor(img)
        if x.shape[0] != self.in_channels:
            x = x[:self.in_channels]
        if not x.requires_grad:
            key = (self, x.shape, x.data.tobytes())
            hit = _feature_memo.get(key)
            if hit is None:
                hit = self._features(x)
                _feature_memo[key] = hit
                if len(_feature_memo) > _MEMO_SIZE:
                    _feature_memo.popitem(last=False)
            else:
                _feature_memo.move_to_end(key)
            return hit
        return self._features(x)

    def _features(self, x) -> list:
        out = []
        for w in self.weights:
            x = dc.avg_pool2x(dc.smooth_leaky(dc.conv3x3(x, w)))
            out.append(dc.channel_normalize(x, self.norm_eps))
        return out

    def pooled(self, img) -> np.ndarray:
        """Global average of each stage's channels, concatenated (forward only)."""
        return np.concatenate([f.data.mean(axis=(1, 2)) for f in self.features(img)])


def feature_distance(fa: Sequence[Tensor], fb: Sequence[Tensor]) -> Tensor:
    total = None
    for a, b in zip(fa, fb):
        term = dc.mean(dc.square(dc.sub(a, b)))
        total = term if total is None else dc.add(total, term)
    return total


def perceptual_distance(a, b, fx: FeatureExtractor) -> Tensor:
    """Sum over stages of the mean squared feature difference."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape:
        raise dc.ShapeError(f"perceptual_distance: {a.shape} vs {b.shape}")
    return feature_distance(fx.features(a), fx.features(b))


# ---------------------------------------------------------------------------
# losses


def _colors(img):
    img = dc.as_tensor(img)
    return img if img.shape[0] <= 3 else img[:3]


def coarse_appearance_loss(canvas_crop, inset, lam1: float, lam2: float,
                           fx: FeatureExtractor, resolution: int = APPEARANCE_RESOLUTION) -> Tensor:
    """L1 plus perceptual distance between 64x64 box-averaged versions."""
    a = dc.downsample_avg(_colors(canvas_crop), resolution)
    b = dc.downsample_avg(_colors(inset), resolution)
    loss = dc.mul(dc.l1(a, b), lam1)
    if lam2:
        loss = dc.add(loss, dc.mul(perceptual_distance(a, b, fx), lam2))
    return loss


def border_l1(canvas_crop, inset, width: int = BORDER_WIDTH) -> Tensor:
    """Unweighted mean absolute difference over the border frame."""
    a, b = _colors(canvas_crop), _colors(inset)
    if a.shape != b.shape:
        raise dc.ShapeError(f"border_l1: {a.shape} vs {b.shape}; resize the crop first")
    return dc.l1(border_region(a, width), border_region(b, width))


def border_loss(canvas_crop, inset, lam3: float, lam4: float, fx: FeatureExtractor,
                width: int = BORDER_WIDTH) -> Tensor:
    """L1 on the border frame plus perceptual distance on border-masked images."""
    a, b = _colors(canvas_crop), _colors(inset)
    _, h, w = a.shape
    if h < 2 * width + 1 or w < 2 * width + 1:
        raise dc.ShapeError(f"border_loss: {h}x{w} image is smaller than {2 * width + 1}px")
    loss = dc.mul(border_l1(a, b, width), lam4)
    if lam3:
        m = Region("border", BBox(0, 0, h, w), width).mask(h, w)
        loss = dc.add(loss, dc.mul(perceptual_distance(dc.mul(a, m), dc.mul(b, m), fx), lam3))
    return loss


def _row_norms(x) -> Tensor:
    """Euclidean norm of every row; the gradient of a zero row is 0."""
    x = dc.as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, g[..., None] * x.data / safe[..., None], 0.0),)

    return dc._record("row_norms", n, (x,), backward)


def latent_regularizer(w_plus, w_avg, lam_r1: float, lam_r2: float = 1.0) -> Tensor:
    """Distance of the base code from the average plus the summed offset norms."""
    base = dc.as_tensor(w_plus.base)
    offset = dc.sub(base, np.asarray(w_avg, dtype=np.float64))
    loss = dc.mul(dc.norm(offset), lam_r1)
    if lam_r2:
        loss = dc.add(loss, dc.mul(dc.sum_(_row_norms(w_plus.deltas)), lam_r2))
    return loss


def region_preservation_loss(img, ref, region: Region, lam_a: float, lam_b: float,
                             fx: FeatureExtractor) -> Tensor:
    """Keep ``img`` close to ``ref`` inside ``region`` (L1 plus perceptual)."""
    a, b = _colors(img), _colors(ref)
    if a.shape != b.shape:
        raise dc.ShapeError(f"region_preservation_loss: {a.shape} vs {b.shape}")
    c, h, w = a.shape
    m = region.mask(h, w)
    count = m.sum()
    if count == 0:
        raise ValueError(f"{region.kind} region selects no pixels")
    diff = dc.mul(dc.abs_(dc.sub(a, b)), m)
    loss = dc.mul(dc.sum_(diff), lam_a / (count * c))
    if lam_b:
        loss = dc.add(loss, dc.mul(perceptual_distance(dc.mul(a, m), dc.mul(b, m), fx), lam_b))
    return loss


def seam_energy(composite, bbox: BBox) -> float:
    """Mean absolute colour jump across the box outline (diagnostic only)."""
    img = np.asarray(composite.data if isinstance(composite, Tensor) else composite)[:3]
    _, h, w = img.shape
    if not bbox.inside(h, w):
        raise ValueError(f"box {bbox} outside {h}x{w} image")
    r0, r1, c0, c1 = bbox.row, bbox.bottom, bbox.col, bbox.right
    diffs = []
    if r0 > 0:
        diffs.append(np.abs(img[:, r0, c0:c1] - img[:, r0 - 1, c0:c1]).ravel())
    if r1 < h:
        diffs.append(np.abs(img[:, r1 - 1, c0:c1] - img[:, r1, c0:c1]).ravel())
    if c0 > 0:
        diffs.append(np.abs(img[:, r0:r1, c0] - img[:, r0:r1, c0 - 1]).ravel())
    if c1 < w:
        diffs.append(np.abs(img[:, r0:r1, c1 - 1] - img[:, r0:r1, c1]).ravel())
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())
