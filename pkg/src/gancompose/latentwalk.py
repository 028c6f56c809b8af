"""Frame-by-frame interpolation between optimized keyframes.

Each interpolated frame moves the inset latent a fraction ``1/(n-i)`` of the
way from the previous frame to the segment's end keyframe, then re-optimizes
it briefly for border coherence, identity and temporal stability.  The canvas
latent and the box are interpolated linearly and never optimized.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import genmodel as gm
from . import lossbank as lb
from .composer import FACE_COLUMN, Generators, compose, crop_to_inset
from .detector import BBox, lerp_bbox


@dataclass
class Keyframe:
    w_canvas: gm.LayeredLatent
    w_inset: gm.LayeredLatent
    bbox: BBox


@dataclass
class WalkPlan:
    keyframes: list
    frames_per_segment: int = 20    # including both keyframes
    iters_per_frame: int = 100
    cyclic: bool = True

    def __post_init__(self):
        if self.frames_per_segment < 2:
            raise ValueError("frames_per_segment must be >= 2")
        if self.iters_per_frame < 0:
            raise ValueError("iters_per_frame must be >= 0")
        if len(self.keyframes) < 2 and not (self.cyclic and len(self.keyframes) == 1):
            raise ValueError("a walk needs at least two keyframes")

    def segments(self) -> list:
        ks = list(self.keyframes)
        if self.cyclic:
            ks = ks + [ks[0]]    # close the loop by repeating the first keyframe
        return list(zip(ks[:-1], ks[1:]))


@dataclass(frozen=True)
class FrameWeights:
    border_l1: float = FACE_COLUMN.border_l1
    border_percep: float = FACE_COLUMN.border_percep
    identity_l1: float = FACE_COLUMN.face_l1
    identity_percep: float = FACE_COLUMN.face_percep
    temporal_l1: float = FACE_COLUMN.border_l1 / 2


def _lerp_latent(a: gm.LayeredLatent, b: gm.LayeredLatent, f: float) -> gm.LayeredLatent:
    return gm.LayeredLatent(a.base + f * (b.base - a.base), a.deltas + f * (b.deltas - a.deltas))


def walk_frame_latent(w_prev: gm.LayeredLatent, w_end: gm.LayeredLatent, i: int, n: int) -> gm.LayeredLatent:
    """Step ``i`` of ``n`` toward ``w_end``: f = 1/(n-i), lands on w_end at i = n-1."""
    if n < 1 or not 0 <= i < n:
        raise ValueError(f"step index must satisfy 0 <= i < n, got i={i}, n={n}")
    f = 1.0 / (n - i)
    if f == 1.0:
        return w_end.detach()
    return _lerp_latent(w_prev, w_end, f)


def _frame_loss(leaves, spec, fx, target, anchor, prev_border, weights: FrameWeights):
    """(loss tensor, unweighted border L1) for one frame's inset latent."""
    img = gm.generate(leaves, spec)
    border = float(lb.border_l1(target, img).data)
    loss = lb.border_loss(target, img, weights.border_percep, weights.border_l1, fx)
    res = spec.out_resolution
    if weights.identity_l1 or weights.identity_percep:
        loss = dc.add(loss, lb.region_preservation_loss(
            img, anchor, lb.Region("interior", BBox(0, 0, res, res)),
            weights.identity_l1, weights.identity_percep, fx))
    if prev_border is not None and weights.temporal_l1:
        loss = dc.add(loss, dc.mul(dc.l1(lb.border_region(img, lb.BORDER_WIDTH), prev_border),
                                   weights.temporal_l1))
    return loss, border


def optimize_frame(w_next: gm.LayeredLatent, canvas: np.ndarray, bbox: BBox, gens: Generators,
                   prev_composite: Optional[np.ndarray] = None, budget: int = 100,
                   lr: float = 0.002, weights: FrameWeights = FrameWeights(),
                   inset: int = 0, stop_border_l1: float = 0.09) -> gm.LayeredLatent:
    """Short ADAM run on one frame's inset latent; returns the best iterate.

    Stops early once the unweighted border L1 drops below ``stop_border_l1``,
    the same rule that ends keyframe optimization.  Only iterates whose border
    L1 is no worse than the starting point's are eligible as the result.
    """
    if budget <= 0:
        return w_next.detach()
    spec = gens.insets[inset]
    res = spec.out_resolution
    target = crop_to_inset(dc.Tensor(canvas), bbox, res)
    anchor = gm.render(w_next, spec)
    prev_border = None
    if prev_composite is not None:
        prev = crop_to_inset(dc.Tensor(prev_composite), bbox, res)
        prev_border = lb.border_region(prev, lb.BORDER_WIDTH).data
    w = w_next.detach()
    state = dc.AdamState.zeros_like(w.vector())
    best, best_loss, border0 = w, np.inf, None
    for step in range(budget + 1):
        with dc.Tape():
            leaves = w.leaves()
            loss, border = _frame_loss(leaves, spec, gens.fx, target, anchor, prev_border, weights)
            value = float(loss.data)
            if border0 is None:
                border0 = border
            if value < best_loss and border <= border0:
                best, best_loss = w, value
            if border < stop_border_l1:
                return w
            if step == budget:
                break
            g = dc.grad(loss, [leaves.base, leaves.deltas])
        v, state = dc.adam_update(state, w.vector(), np.concatenate([g[0].ravel(), g[1].ravel()]), lr)
        w = gm.LayeredLatent.from_vector(v, spec.n_layers, spec.latent_dim)
    return best


def border_delta(frame: np.ndarray, prev: np.ndarray, bbox: BBox) -> float:
    """Mean absolute change over the box's border frame between two composites."""
    _, h, w = frame.shape
    m = lb.Region("border", bbox).mask(h, w)
    return float((np.abs(frame[:3] - prev[:3]) * m).sum() / (3 * m.sum()))


@dataclass
class WalkResult:
    frames: list
    metrics: list                  # (frame, border_l1, temporal_delta)
    bboxes: list
    inset_latents: list = field(default_factory=list)
    error_frame: Optional[int] = None
    error: Optional[str] = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "border_l1", "temporal_delta"])
        for idx, bl1, td in self.metrics:
            writer.writerow([idx, repr(float(bl1)), repr(float(td))])
        return buf.getvalue()

    @property
    def mean_temporal_delta(self) -> float:
        deltas = [m[2] for m in self.metrics[1:]]
        return float(np.mean(deltas)) if deltas else 0.0


def keyframe_composite(k: Keyframe, gens: Generators) -> np.ndarray:
    canvas = gm.render(k.w_canvas, gens.canvas)
    return compose(canvas, gm.render(k.w_inset, gens.insets[0]), k.bbox)


def render_walk(plan: WalkPlan, gens: Generators, lr: float = 0.002,
                weights: FrameWeights = FrameWeights(), optimize: bool = True,
                stop_border_l1: float = 0.09) -> WalkResult:
    """Emit every frame of the plan; keyframes are emitted exactly as given.

    ``optimize=False`` gives the plain interpolation baseline.  A failing frame
    stops the walk and the partial result records its index.
    """
    spec_b = gens.insets[0]
    n_steps = plan.frames_per_segment - 1
    frames, metrics, boxes, latents = [], [], [], []

    def emit(img, box, w_b, canvas):
        crop = crop_to_inset(dc.Tensor(canvas), box, spec_b.out_resolution)
        bl1 = float(lb.border_l1(crop, gm.render(w_b, spec_b)).data)
        delta = border_delta(img, frames[-1], box) if frames else 0.0
        metrics.append((len(frames), bl1, delta))
        frames.append(img)
        boxes.append(box)
        latents.append(w_b.detach())

    result = WalkResult(frames, metrics, boxes, latents)
    for seg, (k0, k1) in enumerate(plan.segments()):
        try:
            if seg == 0:
                emit(keyframe_composite(k0, gens), k0.bbox, k0.w_inset,
                     gm.render(k0.w_canvas, gens.canvas))
            w_prev = k0.w_inset
            for i in range(n_steps - 1):
                f = (i + 1) / n_steps
                canvas = gm.render(_lerp_latent(k0.w_canvas, k1.w_canvas, f), gens.canvas)
                box = lerp_bbox(k0.bbox, k1.bbox, f)
                w_next = walk_frame_latent(w_prev, k1.w_inset, i, n_steps)
                if optimize:
                    w_next = optimize_frame(w_next, canvas, box, gens, frames[-1],
                                            plan.iters_per_frame, lr, weights,
                                            stop_border_l1=stop_border_l1)
                emit(compose(canvas, gm.render(w_next, spec_b), box), box, w_next, canvas)
                w_prev = w_next
            emit(keyframe_composite(k1, gens), k1.bbox, k1.w_inset, gm.render(k1.w_canvas, gens.canvas))
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            result.error_frame = len(frames)
            result.error = str(exc)
            return result
    return result
