import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gancompose import diffcore as dc
from gancompose import lossbank as lb
from gancompose.detector import BBox
from gancompose.genmodel import LayeredLatent

FX = lb.FeatureExtractor()


# --- border_region ----------------------------------------------------------


def test_border_region_counts():
    assert lb.border_region(np.zeros((1, 4, 4)), 1).shape == (1, 12)
    whole = lb.border_region(np.arange(256.0).reshape(1, 16, 16), 8).data
    assert sorted(whole.ravel()) == list(range(256))


def test_border_region_of_constant_image():
    assert np.all(lb.border_region(np.full((3, 20, 20), 0.3), 4).data == 0.3)


def test_border_region_rejects_tiny_images():
    with pytest.raises(ValueError):
        lb.border_region(np.zeros((1, 4, 4)), 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.data())
def test_border_pixel_count_formula(h, w, data):
    x = data.draw(st.integers(1, max(1, (min(h, w) - 1) // 2)))
    n = lb.border_region(np.zeros((1, h, w)), x).shape[1]
    assert n == 2 * x * (h + w) - 4 * x * x


def test_border_indices_are_distinct():
    idx = lb.border_indices(30, 17, 5)
    assert len(set(idx.tolist())) == idx.size


# --- perceptual distance ----------------------------------------------------


def test_perceptual_zero_on_identical(rng):
    a = rng.random((3, 32, 32))
    assert lb.perceptual_distance(a, a.copy(), FX).data == 0.0


def test_perceptual_symmetric(rng):
    for _ in range(3):
        a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
        assert lb.perceptual_distance(a, b, FX).data == pytest.approx(
            lb.perceptual_distance(b, a, FX).data, rel=1e-12)


def test_perceptual_grows_with_noise_level():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a, noise = rng.random((3, 64, 64)), rng.normal(size=(3, 64, 64))
        d = [lb.perceptual_distance(a, a + eps * noise, FX).data for eps in (0.01, 0.05, 0.1)]
        assert d[0] < d[1] < d[2]


def test_perceptual_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        lb.perceptual_distance(np.zeros((3, 8, 8)), np.zeros((3, 16, 16)), FX)


def test_feature_memo_returns_same_values(rng):
    a = rng.random((3, 16, 16))
    first = [f.data.copy() for f in FX.features(a)]
    assert all(np.array_equal(x, y.data) for x, y in zip(first, FX.features(a.copy())))


# --- appearance and border --------------------------------------------------


def test_appearance_identical_is_zero(rng):
    a = rng.random((3, 128, 128))
    assert lb.coarse_appearance_loss(a, a, 500, 0.05, FX).data == 0.0


def test_appearance_constant_offset():
    a = np.full((3, 128, 128), 0.4)
    assert lb.coarse_appearance_loss(a, a + 0.1, 1.0, 0.0, FX).data == pytest.approx(0.1, abs=1e-12)


def test_border_l1_ignores_interior(rng):
    a = rng.random((3, 64, 64))
    b = a.copy()
    b[:, 8:-8, 8:-8] = rng.random((3, 48, 48))
    assert lb.border_l1(a, b).data == 0.0


def test_border_loss_constant_offset():
    a = np.full((3, 64, 64), 0.5)
    assert lb.border_loss(a, a + 0.2, 0.0, 1.0, FX).data == pytest.approx(0.2, abs=1e-12)


def test_border_loss_rejects_small_images():
    with pytest.raises(dc.ShapeError):
        lb.border_loss(np.zeros((3, 16, 16)), np.zeros((3, 16, 16)), 0.1, 1.0, FX)


def test_marker_channel_is_ignored(rng):
    a = rng.random((4, 64, 64))
    b = a.copy()
    b[3] = 0
    assert lb.border_loss(a, b, 0.1, 1.0, FX).data == 0.0


# --- latent regularizer -----------------------------------------------------


def test_regularizer_zero_at_average(rng):
    avg = rng.normal(size=6)
    assert lb.latent_regularizer(LayeredLatent.flat(avg, 4), avg, 1.0, 1.0).data == 0.0


def test_regularizer_base_distance():
    avg = np.zeros(4)
    w = LayeredLatent.flat([0.0, 2.0, 0.0, 0.0], 3)
    assert lb.latent_regularizer(w, avg, 1.0, 0.0).data == pytest.approx(2.0)


def test_regularizer_homogeneous_in_offsets(rng):
    avg = rng.normal(size=5)
    deltas = rng.normal(size=(3, 5))
    one = lb.latent_regularizer(LayeredLatent(avg.copy(), deltas), avg, 0.0, 1.0).data
    two = lb.latent_regularizer(LayeredLatent(avg.copy(), 2 * deltas), avg, 0.0, 1.0).data
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_regularizer_zero_offsets_have_zero_gradient():
    avg = np.zeros(3)
    w = LayeredLatent(np.ones(3), np.zeros((2, 3)))
    _, (gd,) = dc.value_and_grad(lambda d: lb.latent_regularizer(LayeredLatent(w.base, d), avg, 1.0, 1.0),
                                 w.deltas)
    assert np.array_equal(gd, np.zeros((2, 3)))


# --- region preservation ----------------------------------------------------

BOX = BBox(16, 20, 24, 24)


def test_preservation_zero_on_identical(rng):
    a = rng.random((3, 64, 64))
    for kind in ("interior", "exterior", "border", "full"):
        assert lb.region_preservation_loss(a, a, lb.Region(kind, BOX), 1.0, 0.1, FX).data == 0.0


def test_exterior_ignores_box_contents(rng):
    a = rng.random((3, 64, 64))
    b = a.copy()
    b[:, BOX.row:BOX.bottom, BOX.col:BOX.right] = 0
    assert lb.region_preservation_loss(a, b, lb.Region("exterior", BOX), 1.0, 0.0, FX).data == 0.0


@pytest.mark.parametrize("kind", ["interior", "exterior", "border"])
def test_gradient_vanishes_outside_region(rng, kind):
    region = lb.Region(kind, BOX)
    ref = rng.random((3, 64, 64))
    _, (g,) = dc.value_and_grad(lambda t: lb.region_preservation_loss(t, ref, region, 1.0, 0.0, FX),
                                rng.random((3, 64, 64)))
    outside = region.mask(64, 64) == 0
    assert np.all(g[:, outside] == 0.0)
    assert np.any(g[:, ~outside] != 0.0)


def test_invalid_regions():
    with pytest.raises(ValueError):
        lb.Region("halo", BOX)
    with pytest.raises(ValueError):
        lb.Region("interior")
    with pytest.raises(ValueError):
        lb.Region("interior", BBox(0, 0, 16, 16)).mask(64, 64)
    with pytest.raises(ValueError):
        lb.Region("exterior", BBox(60, 60, 10, 10)).mask(64, 64)


# --- seam energy ------------------------------------------------------------


def test_seam_energy_constant_image():
    assert lb.seam_energy(np.full((3, 64, 64), 0.7), BOX) == 0.0


def test_seam_energy_black_canvas_white_inset():
    img = np.zeros((3, 64, 64))
    img[:, BOX.row:BOX.bottom, BOX.col:BOX.right] = 1.0
    assert lb.seam_energy(img, BOX) == 1.0


def test_seam_energy_full_box_is_zero(rng):
    assert lb.seam_energy(rng.random((3, 8, 8)), BBox(0, 0, 8, 8)) == 0.0


# --- nonnegativity ----------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 64, 64)), rng.random((3, 64, 64))
    assert lb.coarse_appearance_loss(a, b, 500, 0.05, FX).data >= 0
    assert lb.border_loss(a, b, 0.1, 10000, FX).data >= 0
    assert lb.region_preservation_loss(a, b, lb.Region("interior", BOX), 5000, 1.75, FX).data >= 0
