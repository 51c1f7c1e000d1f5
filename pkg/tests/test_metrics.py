import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tmgan.checks import _expected_radial
from tmgan.metrics import (NPSCurve, TextureSampleSet, estimate_bias, gaussian_window, noise_std, nps_2d,
                           nps_distance, nps_radial, psnr, radial_bins, ssim, theorem1_check)
from tmgan.synthdata import TextureSpec, sample_texture


# ---------------------------------------------------------------- PSNR / SSIM

def test_psnr_identical_is_inf():
    a = np.arange(12.0).reshape(3, 4)
    assert psnr(a, a, 255) == float("inf")


def test_psnr_hand_value():
    a = np.zeros((8, 8))
    assert psnr(a, a + 1, 255) == pytest.approx(48.1308036, abs=1e-6)


def test_psnr_rejects():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4), 1)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), 0)


def ssim_reference(a, b, L):
    """Direct loop over every 11x11 window."""
    w = gaussian_window()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return np.mean(vals)


def test_ssim_matches_window_reference(rng):
    a = rng.uniform(0, 255, (64, 64))
    b = a + rng.normal(0, 20, a.shape)
    assert ssim(a, b, 255) == pytest.approx(ssim_reference(a, b, 255), abs=1e-10)


def test_ssim_identity_and_anticorrelation(rng):
    a = rng.standard_normal((32, 32))
    assert ssim(a, a, 1.0) == 1.0
    # checkerboard: every Gaussian-window mean is ~0, so only the structure term's sign remains
    board = 100.0 * (-1.0) ** np.add.outer(np.arange(32), np.arange(32))
    assert ssim(board, -board, 1.0) == pytest.approx(-1.0, abs=1e-3)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)), 1.0)


img = arrays(np.float64, (12, 13), elements=st.floats(-100, 100, allow_nan=False))


@given(a=img, b=img)
def test_metric_symmetry(a, b):
    assert psnr(a, b, 100) == psnr(b, a, 100)
    assert ssim(a, b, 100) == pytest.approx(ssim(b, a, 100), abs=1e-12)


# ---------------------------------------------------------------- noise std

def test_noise_std_oracles(rng):
    assert noise_std(np.full((20, 20), 7.0)) == 0.0
    assert noise_std(rng.standard_normal((100, 100))) == pytest.approx(1.0, abs=0.03)
    with pytest.raises(ValueError):
        noise_std(np.zeros(99))


# ---------------------------------------------------------------- NPS

def test_nps_zero_rois():
    c = nps_radial(np.zeros((4, 16, 16)), 0.5)
    assert np.all(c.power == 0)


def test_nps_bins_span_to_nyquist():
    c = nps_radial(np.random.default_rng(0).standard_normal((3, 32, 32)), 0.5)
    assert np.all(np.diff(c.bin_centers) > 0)
    assert c.bin_centers[0] > 0
    assert c.bin_centers[-1] <= 1.0 / (2 * 0.5) + 1e-12
    assert c.ensemble_count == 3


def test_white_nps_flat():
    white = TextureSpec(10.0, "white", seed=0)
    field = np.stack([sample_texture(white, 64, 64, i) for i in range(200)])
    c = nps_radial(field, 0.5)
    assert np.max(np.abs(c.power / (100 * 0.25) - 1)) < 0.10


def test_filtered_nps_matches_kernel():
    spec = TextureSpec(10.0, "bandpass", cutoff=0.2, seed=1)
    field = np.stack([sample_texture(spec, 64, 64, i) for i in range(200)])
    c = nps_radial(field, 0.5)
    assert np.max(np.abs(c.power / _expected_radial(spec, 64, 0.5) - 1)) < 0.10


def test_parseval(rng):
    field = rng.standard_normal((50, 32, 32)) * 5
    nps = nps_2d(field, 0.7)
    energy = nps.sum() / (32 * 0.7) ** 2
    assert energy == pytest.approx(np.mean(np.var(field, axis=(1, 2))), rel=1e-10)


def test_ensemble_detrend_removes_static_pattern(rng):
    pattern = 100 * rng.standard_normal((32, 32))
    rois = pattern + rng.standard_normal((400, 32, 32))
    flat = nps_radial(rois, 1.0, detrend="ensemble").power
    assert np.max(np.abs(flat - 1.0)) < 0.15


@pytest.mark.parametrize("shape", [(1, 16, 16), (3, 16, 8), (3, 12, 12), (16, 16)])
def test_nps_rejects_bad_rois(shape):
    with pytest.raises(ValueError):
        nps_radial(np.zeros(shape), 1.0)


def _curve(p):
    p = np.asarray(p, dtype=float)
    return NPSCurve(np.arange(1, len(p) + 1) / 10, p, 2)


def test_nps_distance_oracles():
    a = _curve([1, 2, 3, 4])
    assert nps_distance(a, a) == 0
    assert nps_distance(a, _curve([2, 4, 6, 8])) == pytest.approx(0, abs=1e-15)
    assert nps_distance(_curve([1, 0, 0]), _curve([0, 0, 1])) == pytest.approx(np.sqrt(2))
    with pytest.raises(ValueError):
        nps_distance(_curve([1, 2]), _curve([1, 2, 3]))


curves = arrays(np.float64, 6, elements=st.floats(0.01, 100))


@given(a=curves, b=curves, c=curves)
def test_nps_distance_pseudometric(a, b, c):
    A, B, C = _curve(a), _curve(b), _curve(c)
    assert nps_distance(A, B) == pytest.approx(nps_distance(B, A), abs=1e-15)
    assert nps_distance(A, C) <= nps_distance(A, B) + nps_distance(B, C) + 1e-12


def test_radial_bins_exclude_dc():
    k, centers = radial_bins(8, 1.0)
    assert k[0, 0] == 0
    freq = np.hypot(*np.meshgrid(np.fft.fftfreq(8), np.fft.fftfreq(8)))
    inside = (freq > 0) & (freq <= 0.5 + 1 / 16)
    assert np.all(k[inside] >= 1) and np.all(k[~inside] == 0)
    np.testing.assert_allclose(np.diff(centers), 1 / 8)


# ---------------------------------------------------------------- bias

def test_bias_identity_generator_vanishes():
    x = np.full((16, 16), 1000.0)
    spec = TextureSpec(20.0, "white", seed=3)
    M = 400
    bias, deltas = estimate_bias(lambda y: y, x, spec, M)
    assert np.abs(bias).max() < 4 * 20 / np.sqrt(M) * 1.5   # max over 256 pixels, a little headroom
    assert deltas.shape == (M, 16, 16)


def test_bias_constant_generator():
    x = np.arange(64.0).reshape(8, 8)
    bias, deltas = estimate_bias(lambda y: np.full_like(y, 5.0), x, TextureSpec(3.0, "white"), 5)
    np.testing.assert_array_equal(bias, 5.0 - x)
    assert np.all(deltas == 0)


def test_bias_reconstructs_draws_exactly():
    # integer-valued outputs keep every sum exact
    x = np.zeros((8, 8))
    gen = lambda y: np.round(y)
    spec = TextureSpec(10.0, "white", seed=2)
    M = 8      # power of two: the mean stays dyadic
    bias, deltas = estimate_bias(gen, x, spec, M)
    assert np.all(deltas.sum(axis=0) == 0)
    from tmgan.synthdata import NOISE_STREAM
    draws = np.stack([gen(x + sample_texture(spec, 8, 8, (0, m), NOISE_STREAM)) for m in range(M)])
    np.testing.assert_array_equal(x + bias + deltas, draws)


def test_bias_needs_two_draws():
    with pytest.raises(ValueError):
        estimate_bias(lambda y: y, np.zeros((4, 4)), TextureSpec(1.0, "white"), 1)


def test_texture_sample_set(rng):
    s = TextureSampleSet(rng.standard_normal(10 ** 5), "target")
    assert s.is_centered()
    assert not TextureSampleSet(rng.standard_normal(1000) + 1).is_centered()
    with pytest.raises(ValueError):
        TextureSampleSet(np.zeros(3), "other")


# ---------------------------------------------------------------- Gaussian-difference check

def test_theorem_gaussian_passes(rng):
    r = theorem1_check(rng.normal(0, 2, 10 ** 5), rng.normal(0, 2, 10 ** 5), 2.0)
    assert r.passed
    assert r.component_std == pytest.approx(2.0, rel=0.03)
    assert "not verified" in r.note


def test_theorem_counterexamples_fail(rng):
    n = 10 ** 5
    assert not theorem1_check(rng.choice([-1.0, 1.0], n), rng.choice([-1.0, 1.0], n), 1.0).difference_gaussian
    assert not theorem1_check(rng.laplace(0, 1, n), rng.laplace(0, 1, n)).difference_gaussian


def test_theorem_detects_asymmetry(rng):
    n = 10 ** 5
    skew = rng.exponential(1.0, n) - 1.0
    assert not theorem1_check(skew, rng.exponential(1.0, n) - 1.0).symmetric


def test_theorem_needs_samples():
    with pytest.raises(ValueError):
        theorem1_check(np.zeros(100), np.zeros(100))
