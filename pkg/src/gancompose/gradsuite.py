"""Central finite-difference checks over every differentiable op and objective.

Each check turns a random draw into a scalar function of one array and its
starting point; :func:`run_suite` evaluates the largest relative error over
several independent draws.  Objectives use a reduced-size generator pair so the
suite stays fast; the code paths are the same as at full size.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import genmodel as gm
from . import lossbank as lb
from .composer import Generators, LossWeights, ObjectiveSpec, phase_objective
from .detector import BBox, detect_all

TOLERANCE = 1e-5


@dataclass(frozen=True)
class GradCheck:
    name: str
    kind: str                      # primitive | loss | objective
    build: Callable                # rng -> (f, x0)


def _unary(op, positive=False, shape=(3, 5, 6)):
    def build(rng):
        x0 = rng.uniform(0.2, 2.0, size=shape) if positive else rng.normal(size=shape)
        if not positive and op in (dc.abs_,):
            x0 = np.sign(x0) * (np.abs(x0) + 0.1)
        r = np.random.default_rng(rng.integers(1 << 31))
        proj = r.normal(size=np.shape(op(dc.Tensor(x0)).data))
        return (lambda t: dc.sum_(dc.mul(op(t), proj))), x0
    return build


def _binary(op, side, shape_a=(3, 4, 5), shape_b=(3, 4, 5), positive_b=False):
    def build(rng):
        a = rng.normal(size=shape_a)
        b = rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.normal(size=shape_b)
        proj = rng.normal(size=np.shape(op(dc.Tensor(a), dc.Tensor(b)).data))
        if side == 0:
            return (lambda t: dc.sum_(dc.mul(op(t, b), proj))), a
        return (lambda t: dc.sum_(dc.mul(op(a, t), proj))), b
    return build


def _fixed(make):
    """``make(rng)`` returns (op on one tensor, input shape, positive)."""
    def build(rng):
        op, shape, positive = make(rng)
        x0 = rng.uniform(0.2, 2.0, size=shape) if positive else rng.normal(size=shape)
        proj = rng.normal(size=np.shape(op(dc.Tensor(x0)).data))
        return (lambda t: dc.sum_(dc.mul(op(t), proj))), x0
    return build


def _modconv_make(which):
    def make(rng):
        c, h = 4, 6
        x = rng.normal(size=(c, h, h))
        scale = rng.uniform(0.5, 1.5, size=c)
        shift = rng.normal(size=c) * 0.3
        k = rng.normal(size=(c, 3, 3)) * 0.3
        mix = rng.normal(size=(5, c)) * 0.4
        bias = rng.normal(size=(5, h, h)) * 0.1
        pattern = 1.0 + rng.normal(size=(c, h, h)) * 0.3
        field = dc.shift_field(k, pattern, (c, h, h))
        args = dict(x=x, scale=scale, shift=shift)

        def op(t):
            a = dict(args)
            a[which] = t
            return dc.modconv(a["x"], a["scale"], a["shift"], k, mix, bias, gain=1.3, field=field)
        return op, args[which].shape, which == "scale"
    return make


def _primitive_checks() -> list:
    P = "primitive"
    out = [
        GradCheck("add", P, _binary(dc.add, 0, (3, 4, 5), (4, 1))),
        GradCheck("add.broadcast", P, _binary(dc.add, 1, (3, 4, 5), (4, 1))),
        GradCheck("sub", P, _binary(dc.sub, 1)),
        GradCheck("mul", P, _binary(dc.mul, 0)),
        GradCheck("div.numerator", P, _binary(dc.div, 0, positive_b=True)),
        GradCheck("div.denominator", P, _binary(dc.div, 1, positive_b=True)),
        GradCheck("square", P, _unary(dc.square)),
        GradCheck("sqrt", P, _unary(dc.sqrt, positive=True)),
        GradCheck("abs", P, _unary(dc.abs_)),
        GradCheck("tanh", P, _unary(dc.tanh)),
        GradCheck("sigmoid", P, _unary(dc.sigmoid)),
        GradCheck("smooth_leaky", P, _unary(dc.smooth_leaky)),
        GradCheck("sum.axis", P, _unary(lambda t: dc.sum_(t, axis=1))),
        GradCheck("mean", P, _unary(lambda t: dc.mean(t, axis=(1, 2)))),
        GradCheck("reshape", P, _unary(lambda t: dc.reshape(t, (15, 6)))),
        GradCheck("getitem", P, _unary(lambda t: dc.getitem(t, (slice(1, 3), slice(None), 2)))),
        GradCheck("concat", P, _unary(lambda t: dc.concat([t, dc.square(t)], axis=1))),
        GradCheck("stack", P, _unary(lambda t: dc.stack([t, dc.tanh(t)], axis=0))),
        GradCheck("norm", P, _unary(dc.norm)),
        GradCheck("channel_normalize", P, _unary(dc.channel_normalize)),
        GradCheck("l1", P, _binary(lambda a, b: dc.l1(a, b), 0)),
        GradCheck("matmul.lhs", P, _binary(dc.matmul, 0, (4, 5), (5, 3))),
        GradCheck("matmul.rhs", P, _binary(dc.matmul, 1, (4, 5), (5, 3))),
        GradCheck("channel_mix", P, _fixed(lambda r: (
            (lambda m: lambda t: dc.channel_mix(m, t))(r.normal(size=(5, 3))), (3, 4, 4), False))),
        GradCheck("dwconv3x3", P, _fixed(lambda r: (
            (lambda k: lambda t: dc.dwconv3x3(t, k))(r.normal(size=(3, 3, 3))), (3, 6, 6), False))),
        GradCheck("conv3x3", P, _fixed(lambda r: (
            (lambda k: lambda t: dc.conv3x3(t, k))(r.normal(size=(4, 3, 3, 3))), (3, 6, 6), False))),
        GradCheck("modconv.x", P, _fixed(_modconv_make("x"))),
        GradCheck("modconv.scale", P, _fixed(_modconv_make("scale"))),
        GradCheck("modconv.shift", P, _fixed(_modconv_make("shift"))),
        GradCheck("resize_bilinear", P, _unary(lambda t: dc.resize_bilinear(t, 7, 9))),
        GradCheck("upsample_bilinear_2x", P, _unary(dc.upsample_bilinear_2x, shape=(3, 4, 4))),
        GradCheck("downsample_avg", P, _unary(lambda t: dc.downsample_avg(t, 4), shape=(3, 8, 8))),
        GradCheck("avg_pool2x", P, _unary(dc.avg_pool2x, shape=(3, 6, 6))),
        GradCheck("crop", P, _unary(lambda t: dc.crop(t, BBox(1, 2, 3, 3)))),
        GradCheck("paste.canvas", P, _binary(lambda a, b: dc.paste(a, b, BBox(1, 1, 2, 3)), 0,
                                             (3, 5, 6), (3, 2, 3))),
        GradCheck("paste.inset", P, _binary(lambda a, b: dc.paste(a, b, BBox(1, 1, 2, 3)), 1,
                                            (3, 5, 6), (3, 2, 3))),
    ]
    return out


# ---------------------------------------------------------------------------
# losses and objectives on a reduced generator pair


@lru_cache(maxsize=4)
def toy_generators(n_insets: int = 1) -> Generators:
    canvas = gm.canvas_spec(seed=1, resolution=128, n_markers=n_insets, n_layers=12,
                            latent_dim=8, channels=6)
    insets = [gm.inset_spec(seed=2 + k, resolution=64, n_layers=10, latent_dim=8, channels=6)
              for k in range(n_insets)]
    return Generators.build(canvas, insets, n_avg=2000)


def _random_latent(spec, avg, rng, spread=0.2):
    w = gm.init_latent("truncated_random", spec, avg, seed=int(rng.integers(1 << 31)))
    return gm.LayeredLatent(w.base, rng.normal(size=w.deltas.shape) * spread)


def _latent_from(t: dc.Tensor, spec) -> gm.LayeredLatent:
    d = spec.latent_dim
    return gm.LayeredLatent(dc.getitem(t, slice(0, d)),
                            dc.reshape(dc.getitem(t, slice(d, None)), (spec.n_layers, d)))


def _image_pair(rng, res=64):
    return rng.uniform(0.05, 0.95, size=(3, res, res)), rng.uniform(0.05, 0.95, size=(3, res, res))


def _loss_checks() -> list:
    L = "loss"
    fx = lb.FeatureExtractor()

    def appearance(rng):
        crop, inset = _image_pair(rng)
        return (lambda t: lb.coarse_appearance_loss(crop, t, 500.0, 0.05, fx)), inset

    def border(rng):
        crop, inset = _image_pair(rng)
        return (lambda t: lb.border_loss(crop, t, 0.1, 10000.0, fx)), inset

    def border_crop(rng):
        crop, inset = _image_pair(rng)
        return (lambda t: lb.border_loss(t, inset, 0.1, 2500.0, fx)), crop

    def percep(rng):
        a, b = _image_pair(rng)
        return (lambda t: lb.perceptual_distance(t, b, fx)), a

    def latent_reg(rng):
        spec = gm.inset_spec(n_layers=6, latent_dim=5)
        avg = rng.normal(size=5)
        x0 = rng.normal(size=5 + 30)
        return (lambda t: lb.latent_regularizer(_latent_from(t, spec), avg, 25000.0, 1.0)), x0

    def preserve_exterior(rng):
        img, ref = _image_pair(rng)
        region = lb.Region("exterior", (BBox(16, 12, 24, 28),))
        return (lambda t: lb.region_preservation_loss(t, ref, region, 9000.0, 0.1, fx)), img

    def preserve_interior(rng):
        img, ref = _image_pair(rng)
        region = lb.Region("interior", BBox(0, 0, 64, 64))
        return (lambda t: lb.region_preservation_loss(t, ref, region, 5000.0, 1.75, fx)), img

    def generator(rng):
        gens = toy_generators(1)
        spec = gens.canvas
        w = _random_latent(spec, gens.canvas_avg, rng)
        r = np.random.default_rng(rng.integers(1 << 31))
        proj = r.normal(size=(spec.out_channels, spec.out_resolution, spec.out_resolution))
        return (lambda t: dc.sum_(dc.mul(gm.generate(_latent_from(t, spec), spec), proj))), w.vector()

    return [
        GradCheck("appearance_loss", L, appearance),
        GradCheck("border_loss", L, border),
        GradCheck("border_loss.crop", L, border_crop),
        GradCheck("perceptual_distance", L, percep),
        GradCheck("latent_regularizer", L, latent_reg),
        GradCheck("preservation.exterior", L, preserve_exterior),
        GradCheck("preservation.interior", L, preserve_interior),
        GradCheck("generator", L, generator),
    ]


def _objective(mode: str, active: str, n_insets: int = 1, snapshot: bool = False):
    def build(rng):
        gens = toy_generators(n_insets)
        latents = {"canvas": _random_latent(gens.canvas, gens.canvas_avg, rng)}
        for k in range(n_insets):
            latents[f"inset{k}"] = _random_latent(gens.insets[k], gens.inset_avgs[k], rng)
        canvas = gm.render(latents["canvas"], gens.canvas)
        bboxes = detect_all(canvas, n_insets)
        res = gens.insets[0].out_resolution
        ref_body = rng.uniform(0.05, 0.95, size=(3, 128, 128))
        ref_faces = [rng.uniform(0.05, 0.95, size=(3, res, res)) for _ in range(n_insets)]
        snaps = ref_faces if snapshot else None
        spec = ObjectiveSpec(mode, LossWeights(), ref_body=ref_body, ref_faces=ref_faces)
        aspec = gens.canvas if active == "canvas" else gens.insets[int(active[5:])]
        image = canvas if mode == "refine_inset" else None
        if image is not None:
            latents.pop("canvas")

        def f(t):
            return phase_objective(spec, gens, {**latents, active: _latent_from(t, aspec)},
                                   bboxes, active, canvas_image=image, snapshots=snaps)
        return f, latents[active].vector()
    return build


def _objective_checks() -> list:
    O = "objective"
    return [
        GradCheck("refine_inset.inset", O, _objective("refine_inset", "inset0")),
        GradCheck("refine_inset.snapshot", O, _objective("refine_inset", "inset0", snapshot=True)),
        GradCheck("joint_refine.canvas", O, _objective("joint_refine", "canvas")),
        GradCheck("joint_refine.inset", O, _objective("joint_refine", "inset0")),
        GradCheck("body_for_face.canvas", O, _objective("body_for_face", "canvas")),
        GradCheck("body_for_face.inset", O, _objective("body_for_face", "inset0")),
        GradCheck("montage.canvas", O, _objective("montage", "canvas")),
        GradCheck("montage.inset", O, _objective("montage", "inset0")),
        GradCheck("multi_inset.canvas", O, _objective("multi_inset", "canvas", n_insets=2)),
        GradCheck("multi_inset.inset1", O, _objective("multi_inset", "inset1", n_insets=2)),
    ]


def all_checks() -> list:
    return _primitive_checks() + _loss_checks() + _objective_checks()


@dataclass
class CheckResult:
    name: str
    kind: str
    points: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_check(check: GradCheck, points: int = 10, eps: float = 1e-7, n_coords: int = 24,
              seed: int = 0) -> CheckResult:
    worst = 0.0
    for p in range(points):
        rng = np.random.default_rng([seed, p, sum(map(ord, check.name))])
        f, x0 = check.build(rng)
        err = dc.finite_difference_check(f, x0, eps=eps, n_coords=n_coords, rng=rng)
        worst = max(worst, err)
    return CheckResult(check.name, check.kind, points, worst)


def run_suite(points: int = 10, eps: float = 1e-7, n_coords: int = 24, seed: int = 0,
              names=None) -> list:
    checks = all_checks()
    if names is not None:
        checks = [c for c in checks if c.name in set(names)]
    return [run_check(c, points, eps, n_coords, seed) for c in checks]


def results_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "kind", "points", "max_rel_error", "passed"])
    for r in results:
        writer.writerow([r.name, r.kind, r.points, repr(r.max_rel_error), int(r.passed)])
    return buf.getvalue()
