"""Objective assembly and the alternating canvas/inset optimization schedule.

One engine, :func:`joint_optimize`, runs every mode.  Each latent has its own
ADAM state; the active phase decides which latent receives a step and which
weight column (body or face) forms its objective.  Bounding boxes are
re-detected on a fixed cadence and then frozen.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import genmodel as gm
from . import lossbank as lb
from .detector import BBox, NoInsetRegion, detect_all

# ---------------------------------------------------------------------------
# weights and schedule


@dataclass(frozen=True)
class LossColumn:
    """Weights of one optimizer's objective."""
    appearance_l1: float = 0.0
    appearance_percep: float = 0.0
    border_l1: float = 0.0
    border_percep: float = 0.0
    mean_reg: float = 0.0
    offset_reg: float = 0.0
    body_l1: float = 0.0
    body_percep: float = 0.0
    face_l1: float = 0.0
    face_percep: float = 0.0


BODY_COLUMN = LossColumn(appearance_l1=500, appearance_percep=0.05, border_l1=2500,
                         mean_reg=25000, offset_reg=1.0, body_l1=9000, body_percep=0.1)
FACE_COLUMN = LossColumn(appearance_l1=500, appearance_percep=0.05, border_l1=10000,
                         border_percep=0.1, offset_reg=1.0, face_l1=5000, face_percep=1.75)


@dataclass(frozen=True)
class LossWeights:
    body: LossColumn = BODY_COLUMN
    face: LossColumn = FACE_COLUMN

    def override(self, changes: dict) -> "LossWeights":
        """Apply ``{"face.border_l1": 5000, ...}`` style overrides."""
        body, face = {}, {}
        names = {f.name for f in fields(LossColumn)}
        for key, value in changes.items():
            col, _, name = key.partition(".")
            if col not in ("body", "face") or name not in names:
                raise KeyError(f"unknown loss weight {key!r}")
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {key} must be finite and >= 0, got {value}")
            (body if col == "body" else face)[name] = value
        return LossWeights(replace(self.body, **body), replace(self.face, **face))

    def flat(self) -> dict:
        out = {}
        for col in ("body", "face"):
            for f in fields(LossColumn):
                out[f"{col}.{f.name}"] = getattr(getattr(self, col), f.name)
        return out


@dataclass(frozen=True)
class ModeInfo:
    terms: tuple
    first_phase: str
    reeval_until: int
    canvas_warmup: int = 0
    optimizes_canvas: bool = True


MODES = {
    "refine_inset": ModeInfo(("appearance", "border"), "inset", 75, optimizes_canvas=False),
    "joint_refine": ModeInfo(("appearance", "border", "latent_reg", "body_preserve"), "inset", 75),
    "body_for_face": ModeInfo(("appearance", "border", "latent_reg", "face_preserve"),
                              "canvas", 150, canvas_warmup=150),
    "montage": ModeInfo(("appearance", "border", "latent_reg", "face_preserve", "body_preserve"),
                        "canvas", 150),
    "multi_inset": ModeInfo(("appearance", "border", "latent_reg"), "inset", 75),
}


@dataclass(frozen=True)
class ScheduleConfig:
    lr_canvas: float = 0.05
    lr_inset: float = 0.002
    switch_every: int = 50
    bbox_reeval_every: int = 25
    bbox_reeval_until: int = 75
    stop_border_l1: float = 0.09
    max_iters: int = 1000
    canvas_warmup: int = 0
    snapshot_at: int = 100
    first_phase: str = "inset"

    def __post_init__(self):
        for name in ("lr_canvas", "lr_inset", "stop_border_l1"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive number, got {v!r}")
        for name in ("switch_every", "bbox_reeval_every", "max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("bbox_reeval_until", "canvas_warmup", "snapshot_at"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bbox_reeval_until > self.max_iters:
            raise ValueError("bbox_reeval_until must not exceed max_iters")
        if self.first_phase not in ("canvas", "inset"):
            raise ValueError(f"first_phase must be 'canvas' or 'inset', got {self.first_phase!r}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "ScheduleConfig":
        info = MODES[mode]
        base = dict(bbox_reeval_until=info.reeval_until, canvas_warmup=info.canvas_warmup,
                    first_phase=info.first_phase)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# objective description


@dataclass(frozen=True)
class Term:
    name: str
    column: str      # "body" or "face"
    latent: str      # "canvas" or "inset"


@dataclass
class ObjectiveSpec:
    mode: str
    weights: LossWeights = field(default_factory=LossWeights)
    ref_body: Optional[np.ndarray] = None
    ref_faces: Optional[list] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")

    @property
    def info(self) -> ModeInfo:
        return MODES[self.mode]

    @property
    def terms(self) -> list:
        names = self.info.terms
        out = []
        columns = ("body", "face") if self.info.optimizes_canvas else ("face",)
        for col in columns:
            latent = "canvas" if col == "body" else "inset"
            for n in names:
                if n == "body_preserve" and col != "body":
                    continue
                if n == "face_preserve" and col != "face":
                    continue
                out.append(Term(n, col, latent))
        return out


def term_audit(spec: ObjectiveSpec) -> tuple:
    """Distinct loss names making up the mode's objective, in canonical order."""
    seen = []
    for t in spec.terms:
        if t.name not in seen:
            seen.append(t.name)
    return tuple(seen)


# ---------------------------------------------------------------------------
# generators bundle and state


@dataclass
class Generators:
    canvas: gm.GeneratorSpec
    insets: tuple
    canvas_avg: np.ndarray
    inset_avgs: tuple
    fx: lb.FeatureExtractor = field(default_factory=lb.FeatureExtractor)

    @classmethod
    def build(cls, canvas: gm.GeneratorSpec, insets: Sequence[gm.GeneratorSpec],
              n_avg: int = 10000, fx: Optional[lb.FeatureExtractor] = None) -> "Generators":
        insets = tuple(insets)
        if canvas.n_markers != len(insets):
            raise ValueError(f"canvas has {canvas.n_markers} markers for {len(insets)} insets")
        return cls(canvas, insets, gm.average_latent(canvas, n_avg).w_avg,
                   tuple(gm.average_latent(s, n_avg).w_avg for s in insets),
                   fx or lb.FeatureExtractor())


@dataclass
class OptState:
    adam: dict
    iteration: int = 0
    phase: str = "inset"
    bboxes: list = field(default_factory=list)
    best_total: float = math.inf
    best_iteration: int = -1
    best_latents: Optional[dict] = None
    best_composite: Optional[np.ndarray] = None
    best_border_l1: Optional[list] = None
    best_bboxes: Optional[list] = None
    snapshots: Optional[list] = None
    border_l1: Optional[list] = None


class OptimizationAborted(RuntimeError):
    def __init__(self, message: str, iteration: int, trace: list):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class JointResult:
    canvas: gm.LayeredLatent
    insets: list
    composite: np.ndarray
    bboxes: list
    trace: list
    state: OptState
    initial_border_l1: list
    border_l1: list


def should_stop(state: OptState, cfg: ScheduleConfig) -> bool:
    """Iteration cap, or every border L1 under the threshold after at least one update.

    A pair that starts below the threshold still takes one step, so the
    result is never just the unoptimized input.
    """
    if state.iteration >= cfg.max_iters:
        return True
    if state.iteration < 1:
        return False
    return bool(state.border_l1) and all(b < cfg.stop_border_l1 for b in state.border_l1)


def phase_at(t: int, cfg: ScheduleConfig, optimizes_canvas: bool = True, n_insets: int = 1) -> str:
    """Active latent at iteration ``t``: "canvas" or "inset<k>"."""
    if not optimizes_canvas:
        cycle = [f"inset{k}" for k in range(n_insets)]
        return cycle[(t // cfg.switch_every) % n_insets]
    if t < cfg.canvas_warmup:
        return "canvas"
    insets = [f"inset{k}" for k in range(n_insets)]
    # a warmup block already covered the canvas, so the cycle resumes on the insets
    canvas_first = cfg.first_phase == "canvas" and not cfg.canvas_warmup
    cycle = ["canvas"] + insets if canvas_first else insets + ["canvas"]
    return cycle[((t - cfg.canvas_warmup) // cfg.switch_every) % len(cycle)]


def reeval_due(t: int, cfg: ScheduleConfig) -> bool:
    return 0 < t <= cfg.bbox_reeval_until and t % cfg.bbox_reeval_every == 0


# ---------------------------------------------------------------------------
# compositing


def compose(canvas, inset, bbox: BBox) -> np.ndarray:
    """Paste ``inset`` (resized to the box) over the colour channels of ``canvas``."""
    canvas = np.asarray(canvas.data if isinstance(canvas, dc.Tensor) else canvas)[:3]
    inset = np.asarray(inset.data if isinstance(inset, dc.Tensor) else inset)[:3]
    _, h, w = canvas.shape
    if not bbox.inside(h, w):
        raise ValueError(f"box {bbox} outside {h}x{w} canvas")
    out = canvas.copy()
    out[:, bbox.row:bbox.bottom, bbox.col:bbox.right] = \
        dc.resize_bilinear(inset, bbox.height, bbox.width).data
    return out


def compose_all(canvas, insets, bboxes) -> np.ndarray:
    out = np.asarray(canvas.data if isinstance(canvas, dc.Tensor) else canvas)[:3]
    for img, b in zip(insets, bboxes):
        out = compose(out, img, b)
    return out


def crop_to_inset(canvas, bbox: BBox, resolution: int) -> dc.Tensor:
    """Canvas colour crop resampled to the inset resolution."""
    colors = canvas[:3] if canvas.shape[0] > 3 else canvas
    return dc.resize_bilinear(dc.crop(colors, bbox), resolution, resolution)


# ---------------------------------------------------------------------------
# objective evaluation


def _column_terms(col: LossColumn, column: str, spec: ObjectiveSpec, gens: Generators,
                  canvas_img, inset_imgs, bboxes, latents, snapshots, active: str) -> dict:
    names = spec.info.terms
    fx = gens.fx
    out = {}
    crops = [crop_to_inset(canvas_img, b, s.out_resolution)
             for b, s in zip(bboxes, gens.insets)]
    for k, (crop, inset) in enumerate(zip(crops, inset_imgs)):
        sfx = f"{k}" if len(inset_imgs) > 1 else ""
        if "appearance" in names and (col.appearance_l1 or col.appearance_percep):
            out[f"appearance{sfx}"] = lb.coarse_appearance_loss(
                crop, inset, col.appearance_l1, col.appearance_percep, fx)
        if "border" in names and (col.border_l1 or col.border_percep):
            out[f"border{sfx}"] = lb.border_loss(crop, inset, col.border_percep, col.border_l1, fx)
    if "latent_reg" in names and (col.mean_reg or col.offset_reg):
        if column == "body":
            out["latent_reg"] = lb.latent_regularizer(latents["canvas"], gens.canvas_avg,
                                                      col.mean_reg, col.offset_reg)
        else:
            for k, avg in enumerate(gens.inset_avgs):
                out[f"latent_reg{k if len(gens.insets) > 1 else ''}"] = lb.latent_regularizer(
                    latents[f"inset{k}"], avg, col.mean_reg, col.offset_reg)
    if column == "body" and "body_preserve" in names and (col.body_l1 or col.body_percep):
        region = lb.Region("exterior", tuple(bboxes))
        out["body_preserve"] = lb.region_preservation_loss(
            canvas_img, spec.ref_body, region, col.body_l1, col.body_percep, fx)
    if column == "face" and (col.face_l1 or col.face_percep):
        refs = None
        if "face_preserve" in names:
            refs = spec.ref_faces
        elif snapshots is not None:
            refs = snapshots
        if refs is not None:
            for k, (inset, ref) in enumerate(zip(inset_imgs, refs)):
                res = inset.shape[-1]
                region = lb.Region("interior", lb.BBox(0, 0, res, res))
                name = "face_preserve" if "face_preserve" in names else "snapshot"
                out[f"{name}{k if len(inset_imgs) > 1 else ''}"] = lb.region_preservation_loss(
                    inset, ref, region, col.face_l1, col.face_percep, fx)
    return out


def _sum(terms: dict):
    total = None
    for v in terms.values():
        total = v if total is None else dc.add(total, v)
    return total


def phase_objective(spec: ObjectiveSpec, gens: Generators, latents: dict, bboxes, active: str,
                    canvas_image=None, snapshots=None) -> dc.Tensor:
    """Scalar minimised while ``active`` is the optimised latent.

    ``latents`` maps "canvas"/"inset{k}" to LayeredLatent (leaves for the
    active one).  ``canvas_image`` stands in for a missing canvas latent.
    """
    n = len(gens.insets)
    if canvas_image is not None and "canvas" not in latents:
        canvas = dc.as_tensor(canvas_image)
    else:
        canvas = gm.generate(latents["canvas"], gens.canvas)
    insets = [gm.generate(latents[f"inset{k}"], gens.insets[k]) for k in range(n)]
    column = "body" if active == "canvas" else "face"
    col = spec.weights.body if column == "body" else spec.weights.face
    terms = _column_terms(col, column, spec, gens, canvas, insets, bboxes, latents, snapshots, active)
    total = _sum(terms)
    return total if total is not None else dc.Tensor(np.zeros(()))


# ---------------------------------------------------------------------------
# the engine


def _fmt_box(b: BBox) -> str:
    return f"{b.row}:{b.col}:{b.height}:{b.width}"


def joint_optimize(spec: ObjectiveSpec, gens: Generators, w_canvas: Optional[gm.LayeredLatent],
                   w_insets: Sequence[gm.LayeredLatent], cfg: Optional[ScheduleConfig] = None,
                   canvas_image: Optional[np.ndarray] = None,
                   bboxes: Optional[Sequence[BBox]] = None) -> JointResult:
    """Alternating minimisation of the mode's objective.

    ``canvas_image``/``bboxes`` replace the canvas generator and detector when
    the canvas is held fixed (refinement against an arbitrary target).
    """
    cfg = cfg or ScheduleConfig.for_mode(spec.mode)
    info = spec.info
    n = len(w_insets)
    if n != len(gens.insets):
        raise ValueError(f"{n} inset latents for {len(gens.insets)} inset generators")
    if n < 1:
        raise ValueError("at least one inset latent is required")
    opt_canvas = info.optimizes_canvas
    if opt_canvas and w_canvas is None:
        raise ValueError(f"mode {spec.mode} needs a canvas latent")
    if canvas_image is not None and opt_canvas:
        raise ValueError("a fixed canvas image only applies to refine_inset")

    latents = {f"inset{k}": w.detach() for k, w in enumerate(w_insets)}
    if w_canvas is not None:
        latents["canvas"] = w_canvas.detach()
    specs = {f"inset{k}": s for k, s in enumerate(gens.insets)}
    specs["canvas"] = gens.canvas
    lrs = {name: (cfg.lr_canvas if name == "canvas" else cfg.lr_inset) for name in latents}
    state = OptState(adam={name: dc.AdamState.zeros_like(w.vector()) for name, w in latents.items()})

    images = {}

    def render(name):
        if name not in images:
            if name == "canvas" and canvas_image is not None:
                images[name] = np.asarray(canvas_image, dtype=np.float64)
            else:
                images[name] = gm.render(latents[name], specs[name])
        return images[name]

    trace = []

    def detect():
        if bboxes is not None:
            return list(bboxes)
        try:
            return detect_all(render("canvas"), gens.canvas.n_markers)
        except NoInsetRegion as exc:
            raise OptimizationAborted(f"detector failed: {exc}", state.iteration, trace) from exc

    if "face_preserve" in info.terms and spec.ref_faces is None:
        spec = replace(spec, ref_faces=[render(f"inset{k}") for k in range(n)])
    if "body_preserve" in info.terms and spec.ref_body is None:
        spec = replace(spec, ref_body=render("canvas"))

    state.bboxes = detect()
    initial_border = None
    term_names: list = []

    t = 0
    while True:
        state.iteration = t
        reeval = reeval_due(t, cfg) and canvas_image is None and bboxes is None
        if reeval:
            state.bboxes = detect()
        if t == cfg.snapshot_at and spec.mode == "refine_inset":
            state.snapshots = [render(f"inset{k}").copy() for k in range(n)]
        active = phase_at(t, cfg, opt_canvas, n)
        state.phase = active

        with dc.Tape():
            leaves = latents[active].leaves()
            imgs = {name: (gm.generate(leaves, specs[name]) if name == active
                           else dc.Tensor(render(name)))
                    for name in list(latents) + (["canvas"] if "canvas" not in latents else [])}
            cols = {}
            if opt_canvas:
                cols["body"] = _column_terms(spec.weights.body, "body", spec, gens, imgs["canvas"],
                                             [imgs[f"inset{k}"] for k in range(n)], state.bboxes,
                                             {**latents, active: leaves}, None, active)
            cols["face"] = _column_terms(spec.weights.face, "face", spec, gens, imgs["canvas"],
                                         [imgs[f"inset{k}"] for k in range(n)], state.bboxes,
                                         {**latents, active: leaves}, state.snapshots, active)
            border = [float(lb.border_l1(crop_to_inset(imgs["canvas"], b, s.out_resolution),
                                         imgs[f"inset{k}"]).data)
                      for k, (b, s) in enumerate(zip(state.bboxes, gens.insets))]
            values = {f"{c}.{name}": float(v.data) for c, terms in cols.items()
                      for name, v in terms.items()}
            total = float(sum(values.values()))
            state.border_l1 = border
            if initial_border is None:
                initial_border = list(border)

            row = {"iteration": t, "phase": active, "reeval": int(reeval),
                   "lr": lrs[active]}
            for k, b in enumerate(state.bboxes):
                row[f"bbox{k}"] = _fmt_box(b)
            row.update(values)
            for k, b in enumerate(border):
                row[f"border_l1_{k}"] = b
            row["total"] = total
            trace.append(row)
            for key in values:
                if key not in term_names:
                    term_names.append(key)

            if not math.isfinite(total):
                raise OptimizationAborted("non-finite loss", t, trace)
            if total < state.best_total:
                state.best_total = total
                state.best_iteration = t
                state.best_latents = {k: v.detach() for k, v in latents.items()}
                state.best_border_l1 = list(border)
                state.best_composite = compose_all(
                    imgs["canvas"].data, [imgs[f"inset{k}"].data for k in range(n)], state.bboxes)
                state.best_bboxes = list(state.bboxes)

            if should_stop(state, cfg):
                break

            column = "body" if active == "canvas" else "face"
            objective = _sum(cols[column])
            if objective is None:
                g = [np.zeros_like(leaves.base.data), np.zeros_like(leaves.deltas.data)]
            else:
                g = dc.grad(objective, [leaves.base, leaves.deltas])
        flat_g = np.concatenate([g[0].ravel(), g[1].ravel()])
        if not np.all(np.isfinite(flat_g)):
            raise OptimizationAborted("non-finite gradient", t, trace)
        w = latents[active]
        new_v, state.adam[active] = dc.adam_update(state.adam[active], w.vector(), flat_g, lrs[active])
        spec_a = specs[active]
        latents[active] = gm.LayeredLatent.from_vector(new_v, spec_a.n_layers, spec_a.latent_dim)
        images.pop(active, None)
        t += 1

    best = state.best_latents
    return JointResult(
        canvas=best.get("canvas"),
        insets=[best[f"inset{k}"] for k in range(n)],
        composite=state.best_composite,
        bboxes=state.best_bboxes,
        trace=trace,
        state=state,
        initial_border_l1=initial_border,
        border_l1=state.best_border_l1,
    )


def refine_inset(w_canvas: gm.LayeredLatent, w_inset: gm.LayeredLatent, gens: Generators,
                 cfg: Optional[ScheduleConfig] = None,
                 weights: Optional[LossWeights] = None) -> JointResult:
    """Optimise only the inset latent against a fixed canvas."""
    spec = ObjectiveSpec("refine_inset", weights or LossWeights())
    return joint_optimize(spec, gens, w_canvas, [w_inset], cfg)


def refine_to_target(target: np.ndarray, w_inset: gm.LayeredLatent, gens: Generators,
                     cfg: Optional[ScheduleConfig] = None,
                     weights: Optional[LossWeights] = None) -> JointResult:
    """Refine the inset against an explicit target image covering the whole box."""
    target = np.asarray(target, dtype=np.float64)
    spec = ObjectiveSpec("refine_inset", weights or LossWeights())
    _, h, w = target.shape
    return joint_optimize(spec, gens, None, [w_inset], cfg, canvas_image=target,
                          bboxes=[BBox(0, 0, h, w)])


# ---------------------------------------------------------------------------
# trace output


def trace_columns(trace: list) -> list:
    cols = []
    for row in trace:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def trace_csv(trace: list, header: Optional[dict] = None) -> str:
    """CSV text with an optional ``# key=value`` preamble."""
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}={v}\n")
    cols = trace_columns(trace)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in trace:
        writer.writerow([_cell(row.get(c, "")) for c in cols])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v
