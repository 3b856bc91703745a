import math

import numpy as np
import pytest

from diffwm.networks import init_params
from diffwm.pipeline import (CSV_HEADER, EvaluationReport, ber, build_redundant_plane, center_crop,
                             diffusion_pattern, embed_image, evaluate_grid, extract_image,
                             frequency_energy_curve, image_ssim, psnr, vote, zigzag_order)
from diffwm.tensorcore import ShapeError
from diffwm.transforms import build_transform


@pytest.fixture(scope="module")
def nets():
    return init_params(0, build_transform("dct"))


def test_plane_all_zero():
    assert not build_redundant_plane(np.zeros(1024)).plane.any()


def test_plane_copies(rng):
    wm = np.zeros(1024)
    wm[0] = 1
    p = build_redundant_plane(wm)
    assert sorted(map(tuple, np.argwhere(p.plane))) == [(0, 0), (0, 32), (32, 0), (32, 32)]
    assert p.copies == 4
    assert p.redundancy_map[0].tolist() == [[0, 0], [0, 32], [32, 0], [32, 32]]
    wm = rng.integers(0, 2, 1024)
    plane = build_redundant_plane(wm)
    assert plane.plane.sum() == 4 * wm.sum()
    for k in (5, 700):
        for r, c in plane.redundancy_map[k]:
            assert plane.plane[r, c] == wm[k]


def test_plane_errors():
    with pytest.raises(ShapeError):
        build_redundant_plane(np.zeros(1000))
    with pytest.raises(ValueError):
        build_redundant_plane(np.full(1024, 3))


def test_vote_rules():
    assert vote(np.full((64, 64), 0.9)).tolist() == [1] * 1024
    probs = np.full((64, 64), 0.1)
    probs[0, 0] = probs[0, 32] = 0.9  # copies {0.9, 0.9, 0.1, 0.1} sum to 2.0
    bits = vote(probs)
    assert bits[0] == 1 and bits[1:].sum() == 0


def test_vote_round_trip(rng):
    wm = rng.integers(0, 2, 1024)
    plane = build_redundant_plane(wm).plane.astype(float)
    assert np.array_equal(vote(plane), wm)
    assert np.array_equal(vote(plane, hard=True), wm)


def test_alpha_zero_embed_is_cover(nets, rng):
    cover = rng.integers(0, 256, (512, 512)).astype(np.uint8)
    out = embed_image(cover, rng.integers(0, 2, 1024), nets[0], alpha=0.0)
    assert np.array_equal(out, cover)


def test_full_plane_consumed(nets, rng):
    # flipping any single bit changes the watermarked image
    cover = np.full((512, 512), 128, dtype=np.uint8)
    wm = np.zeros(1024, dtype=np.uint8)
    base = embed_image(cover, wm, nets[0]).astype(int)
    for k in (0, 511, 1023):
        w2 = wm.copy()
        w2[k] = 1
        diff = embed_image(cover, w2, nets[0]).astype(int) != base
        # four copies, each in a different quadrant
        quads = {(r // 256, c // 256) for r, c in np.argwhere(diff)}
        assert quads == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_extract_shapes(nets, rng):
    bits, probs = extract_image(rng.integers(0, 256, (512, 512)), nets[1])
    assert bits.shape == (1024,) and probs.shape == (64, 64)
    with pytest.raises(ShapeError):
        extract_image(np.zeros((500, 512)), nets[1])
    with pytest.raises(ShapeError):
        extract_image(np.zeros((32, 32)), nets[1])  # plane too small for one copy


def test_ber_examples():
    assert ber([0, 1, 1], [0, 1, 1]) == 0
    assert ber([0, 1, 1, 0], [1, 0, 0, 1]) == 1
    assert ber([0] * 8, [0] * 7 + [1]) == 0.125
    with pytest.raises(ValueError):
        ber([0, 1], [0])


def test_psnr_examples(rng):
    a = rng.integers(2, 250, (64, 64)).astype(float)
    assert psnr(a, a + 1) == pytest.approx(48.131, abs=1e-3)
    assert psnr(a, a - 2) == pytest.approx(48.131 - 20 * math.log10(2), abs=1e-3)
    e = rng.normal(0, 1, a.shape)
    assert psnr(a, a + 3 * e) == pytest.approx(psnr(a, a + e) - 20 * math.log10(3), abs=1e-9)
    assert psnr(a, a) == math.inf


def test_image_ssim_identical(rng):
    a = rng.integers(0, 256, (64, 64))
    assert image_ssim(a, a) == 1.0


def test_center_crop(caplog):
    img = np.arange(70 * 100).reshape(70, 100)
    out = center_crop(img)
    assert out.shape == (64, 96)
    assert out[0, 0] == img[3, 2]
    assert center_crop(out) is out


def test_report_layout(nets, rng):
    img = rng.integers(0, 256, (256, 256)).astype(np.uint8)
    grid = [("identity", [0]), ("jpeg", [90, 50]), ("median", [3])]
    rep = evaluate_grid([("a", img), ("b", img)], *nets, [1.0, 0.5], grid, wm_trials=2, seed=4)
    keys = [(r[0], r[1], r[2], r[3]) for r in rep.rows]
    assert keys == [(n, a, k, float(l)) for n in "ab" for a in (1.0, 0.5) for k, ls in grid for l in ls]
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 1 + len(keys)
    assert "alpha" in rep.summary()


def test_report_reproducible(nets, rng):
    img = rng.integers(0, 256, (256, 256)).astype(np.uint8)
    grid = [("gaussian_noise", [5]), ("crop", [20])]
    a = evaluate_grid([("x", img)], *nets, [1.0], grid, wm_trials=1, seed=3).to_csv()
    b = evaluate_grid([("x", img)], *nets, [1.0], grid, wm_trials=1, seed=3).to_csv()
    assert a == b


def test_identity_column_equals_round_trip(nets, rng):
    img = rng.integers(0, 256, (256, 256)).astype(np.uint8)
    rep = evaluate_grid([("x", img)], *nets, [1.0], [("identity", [0])], wm_trials=3, seed=1)
    expected = []
    for t in range(3):
        wm = np.random.default_rng([1, 0, t]).integers(0, 2, 1024)
        bits, _ = extract_image(embed_image(img, wm, nets[0], 1.0), nets[1])
        expected.append(ber(wm, bits))
    assert rep.rows[0][-1] == pytest.approx(np.mean(expected))


def test_grid_records_failures(nets, tmp_path, rng):
    img = rng.integers(0, 256, (256, 256)).astype(np.uint8)
    rep = evaluate_grid([str(tmp_path / "missing.pgm"), ("ok", img)], *nets, [1.0],
                        [("identity", [0])], wm_trials=1)
    assert len(rep.rows) == 1 and rep.failures[0][0].endswith("missing.pgm")


def test_diffusion_zero(nets):
    p = diffusion_pattern(nets[0], (0, 0), alpha=0.0)
    assert not p.any()


def test_diffusion_shift(nets):
    base = diffusion_pattern(nets[0], (0, 0))
    assert np.abs(base).max() > 0
    for i, j in [(1, 2), (3, 3)]:
        p = diffusion_pattern(nets[0], (i, j))
        assert np.abs(p - np.roll(base, (8 * i, 8 * j), axis=(0, 1))).max() < 1e-6


def test_zigzag():
    z = zigzag_order(8)
    assert z[:6] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
    assert len(set(z)) == 64 and z[-1] == (7, 7)


def test_energy_curve():
    assert not frequency_energy_curve(np.zeros((32, 32))).any()
    c = frequency_energy_curve(np.full((32, 32), 3.0))
    assert c[0] > 0
    np.testing.assert_allclose(c[1:], 0, atol=1e-12)
    assert len(c) == 64
