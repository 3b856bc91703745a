import math

import numpy as np
import pytest
from scipy import stats

from diffwm.attacks import (BASE_LUMA, AttackMixture, AttackSpec, apply_differentiable_attack,
                            apply_real_attack, block_dct, block_idct, build_quant_matrix,
                            horizontal_bands, jpeg_approx, jpeg_quantize, sample_attack)
from diffwm.gradcheck import check_attack, passed
from diffwm.tensorcore import ShapeError
from diffwm.training import PRESETS

DIFF_SPECS = [AttackSpec("identity"), AttackSpec("gaussian_noise", 3), AttackSpec("uniform_noise", 2),
              AttackSpec("salt_pepper", 0.04), AttackSpec("block_crop", 0.25),
              AttackSpec("smoothing", 3), AttackSpec("jpeg_approx", 70)]


@pytest.fixture
def img(rng):
    return rng.uniform(0, 255, (2, 32, 32))


def test_spec_validation():
    for bad in [("blur", 1), ("gaussian_noise", -1), ("salt_pepper", 1.5), ("smoothing", 2),
                ("jpeg_approx", 0), ("jpeg_approx", 70.5)]:
        with pytest.raises(ValueError):
            AttackSpec(*bad)


def test_spec_text_round_trip():
    for spec in DIFF_SPECS:
        assert AttackSpec.parse(str(spec)) == spec
    mix = PRESETS["mt-net"]["attack_mixture"]
    assert AttackMixture.parse(str(mix)) == mix


def test_mixture_must_sum_to_one():
    with pytest.raises(ValueError):
        AttackMixture(((AttackSpec("identity"), 0.5),))


def test_gaussian_zero_sigma(img, rng):
    out, _ = apply_differentiable_attack(img, AttackSpec("gaussian_noise", 0), rng)
    assert np.array_equal(out, img)


def test_smoothing_a1_identity(img, rng):
    out, _ = apply_differentiable_attack(img, AttackSpec("smoothing", 1), rng)
    np.testing.assert_array_equal(out, img)


def test_smoothing_a3_interior_mean(rng):
    x = rng.uniform(0, 255, (16, 16))
    out, _ = apply_differentiable_attack(x, AttackSpec("smoothing", 3), rng)
    for r, c in [(1, 1), (5, 9), (14, 14)]:
        assert out[r, c] == pytest.approx(x[r - 1:r + 2, c - 1:c + 2].mean(), abs=1e-12)


def test_block_crop_count(rng):
    x = np.full((1, 32, 32), 100.0)
    out, _ = apply_differentiable_attack(x, AttackSpec("block_crop", 0.25), rng)
    assert np.sum(out == 0) == 4 * 64


def test_salt_pepper_values(rng):
    x = np.full((64, 64), 100.0)
    out, _ = apply_differentiable_attack(x, AttackSpec("salt_pepper", 0.1), rng)
    assert set(np.unique(out)) <= {0.0, 100.0, 255.0}
    assert 0.05 < np.mean(out != 100) < 0.15


def test_non_finite_rejected(rng):
    with pytest.raises(ValueError):
        apply_differentiable_attack(np.array([[np.inf] * 8] * 8), AttackSpec("identity"), rng)


@pytest.mark.parametrize("spec", DIFF_SPECS, ids=str)
def test_attack_gradients(spec, img):
    assert passed(check_attack(spec, img, seed=9, probes=5))


def test_quant_matrix_50_and_100():
    np.testing.assert_array_equal(build_quant_matrix(50), BASE_LUMA)
    assert np.all(build_quant_matrix(100) == 1)


def test_quant_matrix_monotone():
    assert np.all(build_quant_matrix(90) <= build_quant_matrix(50))
    assert np.all(build_quant_matrix(10) >= build_quant_matrix(50))


def test_quant_matrix_range():
    with pytest.raises(ValueError):
        build_quant_matrix(0)
    with pytest.raises(ValueError):
        build_quant_matrix(101)


def test_block_dct_round_trip(rng):
    x = rng.uniform(0, 255, (24, 16))
    np.testing.assert_allclose(block_idct(block_dct(x)), x, atol=1e-9)


def test_jpeg_approx_zero_noise(rng):
    x = rng.uniform(0, 255, (32, 32))
    noise = np.zeros((4, 4, 8, 8))
    np.testing.assert_allclose(jpeg_approx(x, 70, noise=noise), x, atol=1e-9)


def test_jpeg_approx_envelope(rng):
    x = rng.uniform(0, 255, (64, 64))
    q = build_quant_matrix(50)
    d = block_dct(jpeg_approx(x, 50, rng)) - block_dct(x)
    assert np.all(np.abs(d) <= 0.5 * q + 1e-9)


def test_real_jpeg_inside_envelope(rng):
    x = rng.uniform(0, 255, (64, 64))
    for quality in (50, 70, 90):
        q = build_quant_matrix(quality)
        d = block_dct(jpeg_quantize(x, quality)) - block_dct(x)
        assert np.all(np.abs(d) <= 0.5 * q + 1e-9)


def test_single_mixture_always_same(rng):
    mix = AttackMixture.single(AttackSpec("smoothing", 3))
    assert all(sample_attack(mix, rng) == AttackSpec("smoothing", 3) for _ in range(100))


def test_mixture_frequencies(rng):
    specs = [AttackSpec("identity"), AttackSpec("gaussian_noise", 3), AttackSpec("smoothing", 3)]
    probs = np.array([0.2, 0.5, 0.3])
    mix = AttackMixture(tuple(zip(specs, probs)))
    n = 100_000
    draws = [sample_attack(mix, rng) for _ in range(n)]
    for spec, p in zip(specs, probs):
        count = sum(d == spec for d in draws)
        assert abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    counts = [sum(d == s for d in draws) for s in specs]
    assert stats.chisquare(counts, n * probs).pvalue > 1e-3


def test_mt_net_mixture():
    mix = PRESETS["mt-net"]["attack_mixture"]
    kinds = {(s.kind, s.param): p for s, p in mix.entries}
    assert kinds == {("salt_pepper", 0.04): 0.25, ("gaussian_noise", 3): 0.25,
                     ("jpeg_approx", 70): 0.25, ("smoothing", 3): 0.25}


# --- real attacks ---------------------------------------------------------

@pytest.fixture
def u8(rng):
    return rng.integers(0, 256, (64, 64)).astype(np.uint8)


def test_real_identity_and_types(u8, rng):
    for kind, level in [("identity", 0), ("gaussian_noise", 5), ("salt_pepper", 5), ("crop", 10),
                        ("grid_crop", 20), ("pattern", 3), ("jpeg", 70), ("gaussian_blur", 1),
                        ("sharpen", 1), ("median", 3), ("resize", 0.5)]:
        out = apply_real_attack(u8, kind, level, rng)
        assert out.dtype == np.uint8 and out.shape == u8.shape, kind
    assert np.array_equal(apply_real_attack(u8, "identity"), u8)


def test_median_constant():
    x = np.full((32, 32), 77, dtype=np.uint8)
    assert np.array_equal(apply_real_attack(x, "median", 3), x)


def test_resize_scale_one(u8):
    assert np.array_equal(apply_real_attack(u8, "resize", 1.0), u8)


def test_grid_crop_count(rng):
    x = np.full((512, 512), 200, dtype=np.uint8)
    out = apply_real_attack(x, "grid_crop", 30, rng)
    assert np.sum(out == 0) == math.floor(0.30 * 4096) * 64


def test_crop_area(rng):
    x = np.full((100, 100), 200, dtype=np.uint8)
    out = apply_real_attack(x, "crop", 25, rng)
    assert np.sum(out == 0) == 2500


def test_pattern_mask(u8):
    mask = np.zeros_like(u8)
    mask[10:12] = 1
    out = apply_real_attack(u8, "pattern", 0, mask=mask)
    assert np.all(out[10:12] == 255)
    assert np.array_equal(out[12:], u8[12:])


def test_horizontal_bands():
    m = horizontal_bands((100, 10), 3)
    assert m.sum() == 3 * 4 * 10


def test_real_jpeg_quality_100_near_identity(u8):
    out = apply_real_attack(u8, "jpeg", 100)
    assert np.abs(out.astype(int) - u8).max() <= 1


def test_real_attack_errors(u8):
    with pytest.raises(ValueError):
        apply_real_attack(u8, "rotate", 1)
    with pytest.raises(ValueError):
        apply_real_attack(u8, "salt_pepper", 150)
    with pytest.raises(ValueError):
        apply_real_attack(u8, "median", 4)
    with pytest.raises(ShapeError):
        apply_real_attack(np.zeros((4, 4, 3), np.uint8), "identity")
