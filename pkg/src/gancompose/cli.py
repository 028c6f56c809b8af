"""Command-line entry point.

    gancompose COMMAND [--config FILE] [--seeds 0..9] [--trunc MODE] [--out DIR] [--raw]

Exit status: 0 success, 1 invalid configuration or arguments, 2 optimization
aborted.  The worker count comes from ``GANCOMPOSE_WORKERS`` (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import composer as cp
from . import genmodel as gm
from . import gradsuite, kernels, latentwalk as lw, metrics
from .config import COMMANDS, ConfigError, JobConfig, load_config, loads, parse_seeds, validate
from .detector import NoInsetRegion, detect_all
from .lossbank import FeatureExtractor

WORKERS_ENV = "GANCOMPOSE_WORKERS"


class ArgumentError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gancompose", description="Seamless canvas/inset composites by joint latent optimization.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON job config; missing keys take their defaults")
    p.add_argument("--seeds", help="job seeds: '0..9', '3,5,8' or a single integer")
    p.add_argument("--trunc", choices=("none", "scalar", "adaptive"), help="override truncation.mode")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--raw", action="store_true", help="also dump float64 arrays as .npy")
    return p


# ---------------------------------------------------------------------------
# artifact writers


def to_uint8(img) -> np.ndarray:
    """(C, H, W) float image -> (H, W, 3) uint8 via round(255 * clamp(x, 0, 1))."""
    arr = np.asarray(img, dtype=np.float64)[:3]
    return np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8).transpose(1, 2, 0)


class Writer:
    def __init__(self, out: Path, raw: bool):
        self.out = out
        self.raw = raw
        self.files: list = []
        out.mkdir(parents=True, exist_ok=True)

    def png(self, name: str, img):
        Image.fromarray(to_uint8(img)).save(self.out / f"{name}.png", format="PNG")
        self.files.append(f"{name}.png")
        if self.raw:
            np.save(self.out / f"{name}.npy", np.asarray(img, dtype=np.float64))
            self.files.append(f"{name}.npy")

    def text(self, name: str, content: str):
        (self.out / name).write_text(content)
        self.files.append(name)


# ---------------------------------------------------------------------------
# seeding and models


def job_seeds(cfg: JobConfig, seed: int, stream: int = 0) -> tuple:
    """Canvas and inset seeds for one job, derived from (master seed, job seed)."""
    ss = np.random.SeedSequence([cfg.master_seed, seed, stream])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def build_generators(cfg: JobConfig, n_insets=None) -> cp.Generators:
    insets = cfg.insets if n_insets is None else cfg.insets[:n_insets]
    c = cfg.canvas
    canvas = gm.canvas_spec(seed=c.seed, resolution=c.resolution, n_markers=len(insets),
                            n_layers=c.n_layers, latent_dim=c.latent_dim, channels=c.channels,
                            shift_pattern=c.shift_pattern)
    specs = [gm.inset_spec(seed=g.seed, resolution=g.resolution, n_layers=g.n_layers,
                           latent_dim=g.latent_dim, channels=g.channels, shift_pattern=g.shift_pattern)
             for g in insets]
    return cp.Generators.build(canvas, specs, n_avg=cfg.n_avg, fx=FeatureExtractor(seed=cfg.feature_seed))


def truncated_sample(cfg: JobConfig, spec, avg, seed: int) -> gm.LayeredLatent:
    w = gm.LayeredLatent.flat(gm.sample_w(spec, seed), spec.n_layers)
    t = cfg.truncation
    if t.mode == "scalar":
        return gm.LayeredLatent.flat(gm.truncate(w.base, t.t, avg), spec.n_layers)
    if t.mode == "adaptive":
        return gm.truncate_adaptive(w, t.table, avg)
    return w


def start_latents(cfg: JobConfig, gens: cp.Generators, seed: int, stream: int = 0) -> tuple:
    sa, sb = job_seeds(cfg, seed, stream)
    wa = gm.init_latent(cfg.init.mode, gens.canvas, gens.canvas_avg, seed=sa, alpha=cfg.init.alpha)
    wbs = [gm.init_latent(cfg.init.mode, s, avg, seed=sb + k, alpha=cfg.init.alpha)
           for k, (s, avg) in enumerate(zip(gens.insets, gens.inset_avgs))]
    return wa, wbs


# ---------------------------------------------------------------------------
# jobs: each returns (list of (kind, name, payload), summary dict)


def _job_sample(cfg, gens, seed):
    sa, _ = job_seeds(cfg, seed)
    w = truncated_sample(cfg, gens.canvas, gens.canvas_avg, sa)
    return [("png", f"sample_{seed:04d}", gm.render(w, gens.canvas))], {"seed": seed}


def _trace_header(cfg, mode, seed):
    header = {"mode": mode, "seed": seed, "config_hash": cfg.config_hash()}
    for k, v in sorted(cfg.weights.items()):
        header[f"weight.{k}"] = repr(float(v))
    for k, v in sorted(cfg.schedule.items()):
        header[f"schedule.{k}"] = v
    return header


def _job_optimize(cfg, gens, seed, mode):
    wa, wbs = start_latents(cfg, gens, seed)
    spec = cp.ObjectiveSpec(mode, cfg.loss_weights())
    canvas0 = gm.render(wa, gens.canvas)
    boxes0 = detect_all(canvas0, gens.canvas.n_markers)
    baseline = cp.compose_all(canvas0, [gm.render(w, s) for w, s in zip(wbs, gens.insets)], boxes0)
    res = cp.joint_optimize(spec, gens, wa, wbs, cfg.schedule_for(mode))
    prefix = f"{mode}_{seed:04d}"
    items = [
        ("png", f"{prefix}_copy", baseline),
        ("png", f"{prefix}_composite", res.composite),
        ("text", f"{prefix}_trace.csv", cp.trace_csv(res.trace, _trace_header(cfg, mode, seed))),
    ]
    summary = {
        "seed": seed, "mode": mode, "iterations": len(res.trace),
        "best_iteration": res.state.best_iteration,
        "initial_border_l1": res.initial_border_l1[0], "border_l1": res.border_l1[0],
        "seam_copy": float(np.mean([metrics.seam_energy(baseline, b) for b in boxes0])),
        "seam": float(np.mean([metrics.seam_energy(res.composite, b) for b in res.bboxes])),
    }
    return items, summary


def _job_walk(cfg, gens, seed):
    keys = []
    sched = cfg.schedule_for("refine_inset")
    weights = cfg.loss_weights()
    for j in range(cfg.walk.n_keyframes):
        wa, wbs = start_latents(cfg, gens, seed, stream=1 + j)
        r = cp.refine_inset(wa, wbs[0], gens, sched, weights)
        keys.append(lw.Keyframe(wa, r.insets[0], r.bboxes[0]))
    plan = lw.WalkPlan(keys, cfg.walk.frames_per_segment, cfg.walk.iters_per_frame, cfg.walk.cyclic)
    result = lw.render_walk(plan, gens, lr=sched.lr_inset, stop_border_l1=sched.stop_border_l1)
    items = [("png", f"walk_{seed:04d}_{i:04d}", f) for i, f in enumerate(result.frames)]
    items.append(("text", f"walk_{seed:04d}_metrics.csv", result.metrics_csv()))
    summary = {"seed": seed, "frames": len(result.frames),
               "mean_temporal_delta": result.mean_temporal_delta}
    if result.error is not None:
        summary["error"] = f"frame {result.error_frame}: {result.error}"
    return items, summary


def _job_eval(cfg, gens, seed):
    n = cfg.eval.n_samples
    real, gen, crops_real, crops_gen = [], [], [], []
    for i in range(n):
        sa_r, _ = job_seeds(cfg, seed, cfg.eval.reference_offset + i)
        sa_g, _ = job_seeds(cfg, seed, i)
        w_r = gm.LayeredLatent.flat(gm.sample_w(gens.canvas, sa_r), gens.canvas.n_layers)
        w_g = truncated_sample(cfg, gens.canvas, gens.canvas_avg, sa_g)
        for w, full, crops in ((w_r, real, crops_real), (w_g, gen, crops_gen)):
            img = gm.render(w, gens.canvas)
            full.append(img[:3])
            box = detect_all(img, gens.canvas.n_markers)[0]
            crops.append(metrics.crop_with_margin(img, box, cfg.eval.margin))
    fx = gens.fx
    h = cfg.config_hash()
    rows = []
    for label, a, b in (("full", real, gen), ("crop", crops_real, crops_gen)):
        fa, fb = metrics.embed(a, fx, "real"), metrics.embed(b, fx)
        p, r = metrics.precision_recall(fa, fb, cfg.eval.k)
        rows += [(f"fid_{label}", metrics.fid(fa, fb), n, seed, h),
                 (f"precision_{label}", p, n, seed, h),
                 (f"recall_{label}", r, n, seed, h)]
    return [("text", f"eval_{seed:04d}.csv", metrics.report_csv(rows))], {"seed": seed}


def _job_gradcheck(cfg, gens, seed):
    g = cfg.gradcheck
    results = gradsuite.run_suite(points=g.points, eps=g.eps, n_coords=g.coords, seed=g.seed + seed)
    summary = {"seed": seed, "checks": len(results),
               "failed": [r.name for r in results if not r.passed],
               "max_rel_error": max(r.max_rel_error for r in results)}
    return [("text", f"gradcheck_{seed:04d}.csv", gradsuite.results_csv(results))], summary


def _run_job(command: str, cfg_json: str, seed: int):
    cfg = loads(cfg_json)
    if command == "gradcheck":
        return _job_gradcheck(cfg, None, seed)
    n_insets = len(cfg.insets) if command == "joint" and cfg.joint_mode == "multi_inset" else 1
    gens = build_generators(cfg, n_insets)
    if command == "sample":
        return _job_sample(cfg, gens, seed)
    if command == "refine":
        return _job_optimize(cfg, gens, seed, "refine_inset")
    if command == "joint":
        return _job_optimize(cfg, gens, seed, cfg.joint_mode)
    if command == "montage":
        return _job_optimize(cfg, gens, seed, "montage")
    if command == "walk":
        return _job_walk(cfg, gens, seed)
    if command == "eval":
        return _job_eval(cfg, gens, seed)
    raise ArgumentError(f"command: unknown {command!r}")


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be >= 1")
    return n


def execute(command: str, cfg: JobConfig, out: Path, raw: bool = False) -> int:
    writer = Writer(out, raw)
    text = cfg.to_json()
    n = min(_workers(), len(cfg.seeds))
    if n > 1:
        with ProcessPoolExecutor(n, initializer=kernels.tune_allocator) as pool:
            outcomes = list(pool.map(_run_job, [command] * len(cfg.seeds), [text] * len(cfg.seeds),
                                     cfg.seeds))
    else:
        outcomes = [_run_job(command, text, s) for s in cfg.seeds]
    summaries = []
    for items, summary in outcomes:
        for kind, name, payload in items:
            if kind == "png":
                writer.png(name, payload)
            else:
                writer.text(name, payload)
        summaries.append(summary)
    status = 0
    if command == "gradcheck" and any(s["failed"] for s in summaries):
        status = 1
    if command == "walk" and any("error" in s for s in summaries):
        status = 2
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "master_seed": cfg.master_seed,
        "weights_override": dict(sorted(cfg.weights.items())),
        "schedule_override": dict(sorted(cfg.schedule.items())),
        "config": cfg.to_dict(),
        "results": summaries,
        "files": sorted(writer.files),
        "status": status,
    }
    writer.text("manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return status


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else JobConfig()
        if args.seeds is not None:
            cfg.seeds = parse_seeds(args.seeds, "--seeds")
        if args.trunc is not None:
            cfg.truncation.mode = args.trunc
        validate(cfg)
        return execute(args.command, cfg, Path(args.out), args.raw)
    except ConfigError as exc:
        print(f"gancompose: error: {exc}", file=sys.stderr)
        return 1
    except (cp.OptimizationAborted, NoInsetRegion) as exc:
        print(f"gancompose: optimization aborted: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> None:
    kernels.tune_allocator()
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
