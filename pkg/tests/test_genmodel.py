import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gancompose import diffcore as dc
from gancompose import genmodel as gm

# Largest ||map(z) - map(z')|| / ||z - z'|| seen over 20000 nearby pairs in the
# unit ball for the default canvas generator (measured max 2.004).
LIPSCHITZ_CANVAS = 2.01


@pytest.fixture(scope="module")
def canvas():
    return gm.canvas_spec()


def test_map_is_deterministic(canvas, rng):
    z = rng.normal(size=32)
    assert np.array_equal(gm.map_latent(z, canvas), gm.map_latent(z.copy(), canvas))


def test_map_separates_single_coordinate_changes(canvas, rng):
    for _ in range(100):
        z = rng.normal(size=32)
        z2 = z.copy()
        z2[rng.integers(32)] += rng.normal()
        assert not np.array_equal(gm.map_latent(z, canvas), gm.map_latent(z2, canvas))


def test_map_rejects_wrong_dimension(canvas):
    with pytest.raises(dc.ShapeError):
        gm.map_latent(np.zeros(31), canvas)


def test_map_lipschitz_on_unit_ball(canvas):
    rng = np.random.default_rng(2024)
    w = canvas.weights
    assert LIPSCHITZ_CANVAS <= np.linalg.norm(w.map1, 2) * np.linalg.norm(w.map2, 2)
    for _ in range(2000):
        z = rng.normal(size=32)
        z *= rng.random() ** (1 / 32) / np.linalg.norm(z)
        z2 = rng.normal(size=32)
        z2 *= rng.random() ** (1 / 32) / np.linalg.norm(z2)
        gap = np.linalg.norm(gm.map_latent(z, canvas) - gm.map_latent(z2, canvas))
        assert gap <= LIPSCHITZ_CANVAS * np.linalg.norm(z - z2)


def test_average_of_one_sample(canvas):
    avg = gm.average_latent(canvas, 1, seed=5)
    z = np.random.default_rng(5).standard_normal((1, 32))
    assert np.allclose(avg.w_avg, gm.map_latent(z, canvas)[0], rtol=0, atol=1e-15)
    assert avg.sample_count == 1


def test_average_is_reproducible(canvas):
    a = gm.average_latent(canvas, 500, seed=3)
    b = gm.average_latent(canvas, 500, seed=3)
    assert np.array_equal(a.w_avg, b.w_avg)


def test_average_converges(canvas):
    small = gm.average_latent(canvas, 10000, seed=0).w_avg
    large = gm.average_latent(canvas, 100000, seed=1).w_avg
    rng = np.random.default_rng(0)
    std = gm.map_latent(rng.standard_normal((10000, 32)), canvas).std(axis=0)
    assert np.all(np.abs(small - large) < 3 * std / np.sqrt(10000))


def test_truncate_endpoints_and_ratio(rng):
    w, avg = rng.normal(size=8), rng.normal(size=8)
    assert np.array_equal(gm.truncate(w, 1.0, avg), w)
    assert np.array_equal(gm.truncate(w, 0.0, avg), avg)
    d4 = np.linalg.norm(gm.truncate(w, 0.4, avg) - avg)
    d7 = np.linalg.norm(gm.truncate(w, 0.7, avg) - avg)
    assert d4 / d7 == pytest.approx(4 / 7, rel=1e-12)
    with pytest.raises(ValueError):
        gm.truncate(w, 1.2, avg)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_truncation_composes_multiplicatively(t1, t2, seed):
    rng = np.random.default_rng(seed)
    w, avg = rng.normal(size=8), rng.normal(size=8)
    twice = gm.truncate(gm.truncate(w, t1, avg), t2, avg)
    assert np.allclose(twice, gm.truncate(w, t1 * t2, avg), rtol=0, atol=1e-12)


def test_adaptive_truncation_identities(rng):
    n, d = 18, 8
    w = gm.LayeredLatent(rng.normal(size=d), rng.normal(size=(n, d)))
    avg = rng.normal(size=d)
    same = gm.truncate_adaptive(w, np.ones(n), avg)
    assert np.allclose(same.codes(), w.codes(), rtol=0, atol=1e-12)
    flat = gm.truncate_adaptive(w, np.zeros(n), avg)
    assert np.allclose(flat.codes(), np.tile(avg, (n, 1)), rtol=0, atol=1e-12)
    t = 0.6
    per_layer = np.array([gm.truncate(c, t, avg) for c in w.codes()])
    assert np.allclose(gm.truncate_adaptive(w, np.full(n, t), avg).codes(), per_layer, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        gm.truncate_adaptive(w, np.ones(n - 1), avg)


def test_adaptive_table_has_one_factor_per_layer():
    assert len(gm.ADAPTIVE_TRUNCATION) == 18
    assert gm.ADAPTIVE_TRUNCATION[:4] == (0.35, 0.25, 0.25, 0.70)


def test_init_latent_modes(small_gens):
    spec, avg = small_gens.canvas, small_gens.canvas_avg
    average = gm.init_latent("average", spec, avg)
    assert gm.init_latent("truncated_random", spec, avg, seed=4, alpha=1.0) == average
    w_rand = gm.sample_w(spec, 4)
    raw = gm.init_latent("truncated_random", spec, avg, seed=4, alpha=0.0)
    assert np.array_equal(raw.base, w_rand) and not raw.deltas.any()
    a = gm.init_latent("truncated_random", spec, avg, seed=4)
    b = gm.init_latent("truncated_random", spec, avg, seed=5)
    assert not np.array_equal(a.base, b.base)
    assert np.linalg.norm(a.base - avg) == pytest.approx(0.5 * np.linalg.norm(w_rand - avg), rel=1e-12)
    with pytest.raises(ValueError):
        gm.init_latent("uniform", spec, avg)


def test_generate_is_bit_identical(small_gens):
    w = gm.init_latent("truncated_random", small_gens.canvas, small_gens.canvas_avg, seed=1)
    assert np.array_equal(gm.render(w, small_gens.canvas), gm.render(w.copy(), small_gens.canvas))


def test_same_seed_same_weights():
    a, b = gm.inset_spec(seed=9, n_layers=4, latent_dim=4), gm.inset_spec(seed=9, n_layers=4, latent_dim=4)
    assert np.array_equal(a.weights.style, b.weights.style)
    w = gm.LayeredLatent.flat(np.ones(4), 4)
    assert np.array_equal(gm.render(w, a), gm.render(w, b))


def test_generate_output_shape_and_range(small_gens):
    w = gm.init_latent("average", small_gens.canvas, small_gens.canvas_avg)
    img = gm.render(w, small_gens.canvas)
    assert img.shape == (4, 128, 128)
    assert img[:3].min() > 0 and img[:3].max() < 1
    assert img[3].min() >= 0 and img[3].max() <= 1


def test_generate_rejects_wrong_latent(small_gens):
    with pytest.raises(dc.ShapeError):
        gm.render(gm.LayeredLatent.flat(np.zeros(8), 3), small_gens.canvas)


def test_generate_pixel_gradient_matches_finite_differences(small_gens):
    spec = small_gens.insets[0]
    w = gm.init_latent("truncated_random", spec, small_gens.inset_avgs[0], seed=3)
    rng = np.random.default_rng(0)
    probe = rng.normal(size=(3, spec.out_resolution, spec.out_resolution))

    def f(deltas):
        return dc.sum_(dc.mul(gm.generate(gm.LayeredLatent(w.base, deltas), spec), probe))

    err = dc.finite_difference_check(f, w.deltas, eps=1e-7, rng=rng, n_coords=24)
    assert err < 1e-5


def test_layered_latent_vector_round_trip(rng):
    w = gm.LayeredLatent(rng.normal(size=5), rng.normal(size=(3, 5)))
    assert gm.LayeredLatent.from_vector(w.vector(), 3, 5) == w


def test_spec_json_round_trip(tmp_path):
    spec = gm.canvas_spec(seed=11, shift_pattern=0.5)
    spec.save(tmp_path / "g.json")
    assert gm.GeneratorSpec.load(tmp_path / "g.json") == spec


def test_spec_rejects_bad_resolution():
    with pytest.raises(ValueError):
        gm.GeneratorSpec(seed=0, out_resolution=100)


def test_resolution_ladder():
    spec = gm.canvas_spec()
    assert [spec.layer_resolution(i) for i in range(0, 18, 2)] == [4, 8, 16, 32, 64, 128, 256, 256, 256]


def test_late_layers_barely_move_coarse_structure(full_gens):
    spec, avg = full_gens.canvas, full_gens.canvas_avg
    quieter = 0
    for seed in range(50):
        base = gm.init_latent("truncated_random", spec, avg, seed=seed)
        ref = dc.downsample_avg(gm.render(base, spec)[:3], 64).data
        v = np.random.default_rng(100 + seed).normal(size=spec.latent_dim)
        v *= 0.5 / np.linalg.norm(v)
        change = []
        for layer in (3, 17):
            w = base.copy()
            w.deltas[layer] += v
            change.append(np.abs(dc.downsample_avg(gm.render(w, spec)[:3], 64).data - ref).mean())
        quieter += change[1] < change[0]
    assert quieter >= 40
