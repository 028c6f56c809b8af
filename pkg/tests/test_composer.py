import numpy as np
import pytest

from gancompose import composer as cp
from gancompose import diffcore as dc
from gancompose import genmodel as gm
from gancompose.detector import BBox


def latents(gens, seed):
    wa = gm.init_latent("truncated_random", gens.canvas, gens.canvas_avg, seed=1000 + seed)
    wbs = [gm.init_latent("truncated_random", s, avg, seed=2000 + seed + 17 * k)
           for k, (s, avg) in enumerate(zip(gens.insets, gens.inset_avgs))]
    return wa, wbs


# --- compose ----------------------------------------------------------------


def test_compose_with_matching_inset_is_identity(rng):
    canvas = rng.random((4, 32, 32))
    box = BBox(4, 6, 10, 12)
    out = cp.compose(canvas, canvas[:3, 4:14, 6:18], box)
    assert np.array_equal(out, canvas[:3])


def test_compose_area_fraction():
    box = BBox(8, 8, 16, 8)
    out = cp.compose(np.zeros((3, 32, 32)), np.ones((3, 64, 64)), box)
    assert out.mean() == box.area / (32 * 32)


def test_compose_round_trip_and_outside_untouched(rng):
    canvas, inset = rng.random((4, 40, 40)), rng.random((3, 64, 64))
    box = BBox(5, 7, 20, 24)
    out = cp.compose(canvas, inset, box)
    assert np.array_equal(dc.crop(out, box).data, dc.resize_bilinear(inset, 20, 24).data)
    mask = np.ones((40, 40), bool)
    mask[5:25, 7:31] = False
    assert np.array_equal(out[:, mask], canvas[:3, mask])


def test_compose_rejects_outside_box(rng):
    with pytest.raises(ValueError):
        cp.compose(rng.random((3, 16, 16)), rng.random((3, 8, 8)), BBox(10, 10, 8, 8))


# --- schedule ---------------------------------------------------------------


def state(border, iteration):
    return cp.OptState(adam={}, iteration=iteration, border_l1=border)


def test_should_stop_cases():
    cfg = cp.ScheduleConfig()
    assert cp.should_stop(state([0.08], 10), cfg)
    assert cp.should_stop(state([0.5], 1000), cfg)
    assert not cp.should_stop(state([0.5], 999), cfg)
    assert not cp.should_stop(state([0.08, 0.2], 10), cfg)
    assert not cp.should_stop(state([0.09], 10), cfg)
    assert not cp.should_stop(state([0.0], 0), cfg)
    assert cp.should_stop(state([0.0], 1), cfg)


def test_schedule_defaults():
    cfg = cp.ScheduleConfig()
    assert (cfg.lr_canvas, cfg.lr_inset) == (0.05, 0.002)
    assert (cfg.switch_every, cfg.bbox_reeval_every) == (50, 25)
    assert (cfg.stop_border_l1, cfg.max_iters) == (0.09, 1000)
    assert cp.ScheduleConfig.for_mode("body_for_face").bbox_reeval_until == 150
    assert cp.ScheduleConfig.for_mode("joint_refine").bbox_reeval_until == 75


@pytest.mark.parametrize("bad", [dict(lr_canvas=-0.1), dict(lr_inset=0.0), dict(switch_every=0),
                                 dict(bbox_reeval_until=2000), dict(first_phase="body")])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        cp.ScheduleConfig(**bad)


def test_phase_alternation():
    cfg = cp.ScheduleConfig.for_mode("joint_refine")
    phases = [cp.phase_at(t, cfg) for t in range(200)]
    assert phases[0] == phases[49] == "inset0" and phases[50] == phases[99] == "canvas"
    assert phases[100] == "inset0"
    warm = cp.ScheduleConfig.for_mode("body_for_face")
    assert {cp.phase_at(t, warm) for t in range(150)} == {"canvas"}
    assert [cp.phase_at(t, warm) for t in (150, 199, 200, 250)] == ["inset0", "inset0", "canvas", "inset0"]
    assert cp.phase_at(120, cfg, optimizes_canvas=False) == "inset0"
    assert [cp.phase_at(t, cfg, n_insets=2) for t in (0, 50, 100, 150)] == \
        ["inset0", "inset1", "canvas", "inset0"]


def test_reeval_cadence():
    cfg = cp.ScheduleConfig.for_mode("montage")
    assert [t for t in range(400) if cp.reeval_due(t, cfg)] == [25, 50, 75, 100, 125, 150]


# --- objectives -------------------------------------------------------------


def test_term_audit():
    audit = {m: cp.term_audit(cp.ObjectiveSpec(m)) for m in cp.MODES}
    assert audit["refine_inset"] == ("appearance", "border")
    assert audit["joint_refine"] == ("appearance", "border", "latent_reg", "body_preserve")
    assert audit["body_for_face"] == ("appearance", "border", "latent_reg", "face_preserve")
    assert set(audit["montage"]) == {"appearance", "border", "latent_reg", "face_preserve",
                                     "body_preserve"}
    with pytest.raises(ValueError):
        cp.ObjectiveSpec("blend")


def test_weight_table_defaults():
    w = cp.LossWeights()
    assert (w.body.appearance_l1, w.body.appearance_percep, w.body.border_l1) == (500, 0.05, 2500)
    assert (w.body.mean_reg, w.body.body_l1, w.body.body_percep) == (25000, 9000, 0.1)
    assert (w.face.border_l1, w.face.border_percep) == (10000, 0.1)
    assert (w.face.face_l1, w.face.face_percep, w.face.mean_reg) == (5000, 1.75, 0)


def test_weight_overrides():
    w = cp.LossWeights().override({"face.border_l1": 12345})
    assert w.face.border_l1 == 12345 and w.body.border_l1 == 2500
    with pytest.raises(KeyError):
        cp.LossWeights().override({"face.sharpness": 1})
    with pytest.raises(ValueError):
        cp.LossWeights().override({"body.border_l1": -1})


# --- engine -----------------------------------------------------------------


def test_refine_stops_at_fixed_point(small_gens):
    _, (wb,) = latents(small_gens, 0)
    target = gm.render(wb, small_gens.insets[0])
    res = cp.refine_to_target(target, wb, small_gens)
    # one zero-gradient step, then the threshold stop
    assert len(res.trace) == 2
    assert res.border_l1 == [0.0]
    assert res.insets[0] == wb


def test_zero_gradient_objective_is_stationary(small_gens):
    zeros = {k: 0.0 for k in cp.LossWeights().flat()}
    zeros.update({"body.body_l1": 9000, "body.body_percep": 0.1})
    spec = cp.ObjectiveSpec("joint_refine", cp.LossWeights().override(zeros))
    wa, wbs = latents(small_gens, 1)
    cfg = cp.ScheduleConfig.for_mode("joint_refine", max_iters=100)
    res = cp.joint_optimize(spec, small_gens, wa, wbs, cfg)
    assert len(res.trace) == 101
    assert np.max(np.abs(res.canvas.vector() - wa.vector())) < 1e-9


def test_trace_records_schedule(small_gens):
    wa, wbs = latents(small_gens, 2)
    cfg = cp.ScheduleConfig.for_mode("joint_refine", max_iters=120, stop_border_l1=1e-9)
    res = cp.joint_optimize(cp.ObjectiveSpec("joint_refine"), small_gens, wa, wbs, cfg)
    rows = res.trace
    assert [r["phase"] for r in rows[:50]] == ["inset0"] * 50
    assert [r["phase"] for r in rows[50:100]] == ["canvas"] * 50
    assert [r["iteration"] for r in rows if r["reeval"]] == [25, 50, 75]
    assert {r["lr"] for r in rows if r["phase"] == "canvas"} == {0.05}
    assert {r["lr"] for r in rows if r["phase"] == "inset0"} == {0.002}
    best = np.minimum.accumulate([r["total"] for r in rows])
    assert res.state.best_total == best[-1]
    assert len({r["bbox0"] for r in rows[76:]}) == 1


def test_only_active_latent_moves(small_gens):
    wa, wbs = latents(small_gens, 3)
    cfg = cp.ScheduleConfig.for_mode("joint_refine", max_iters=40, bbox_reeval_until=25,
                                     stop_border_l1=1e-9)
    res = cp.joint_optimize(cp.ObjectiveSpec("joint_refine"), small_gens, wa, wbs, cfg)
    assert res.canvas == wa
    assert res.insets[0] != wbs[0]


def test_joint_is_deterministic(small_gens):
    wa, wbs = latents(small_gens, 4)
    cfg = cp.ScheduleConfig.for_mode("montage", max_iters=30, bbox_reeval_until=25,
                                     stop_border_l1=1e-9)
    a = cp.joint_optimize(cp.ObjectiveSpec("montage"), small_gens, wa, wbs, cfg)
    b = cp.joint_optimize(cp.ObjectiveSpec("montage"), small_gens, wa, wbs, cfg)
    assert cp.trace_csv(a.trace) == cp.trace_csv(b.trace)
    assert np.array_equal(a.composite, b.composite)


def test_nan_latent_aborts(small_gens):
    _, (wb,) = latents(small_gens, 5)
    wb = wb.copy()
    wb.base[0] = np.nan
    target = np.full((3, 64, 64), 0.5)
    with pytest.raises(cp.OptimizationAborted) as err:
        cp.refine_to_target(target, wb, small_gens)
    assert err.value.iteration == 0 and len(err.value.trace) == 1


def test_engine_argument_checks(small_gens):
    wa, wbs = latents(small_gens, 6)
    with pytest.raises(ValueError):
        cp.joint_optimize(cp.ObjectiveSpec("joint_refine"), small_gens, None, wbs)
    with pytest.raises(ValueError):
        cp.joint_optimize(cp.ObjectiveSpec("joint_refine"), small_gens, wa, wbs * 2)


def test_trace_csv_header(small_gens):
    text = cp.trace_csv([{"iteration": 0, "total": 1.5}], {"config_hash": "abc"})
    assert text.splitlines() == ["# config_hash=abc", "iteration,total", "0,1.5"]
