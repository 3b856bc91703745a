import logging

import numpy as np
import pytest

from diffwm.data import DatasetError, build_dataset, load_gray, synthetic_image, to_grayscale
from diffwm import imageio


def test_grayscale_red():
    assert to_grayscale(np.array([255.0, 0.0, 0.0])) == pytest.approx(76.245, abs=1e-9)


def test_synthetic_range(rng):
    img = synthetic_image(rng, 128)
    assert img.shape == (128, 128)
    assert img.min() >= 0 and img.max() <= 255
    assert img.std() > 10


def test_stratified_counts(rng):
    ds = build_dataset(["synthetic:2"], 1000, 10, rng)
    assert ds.patches.shape == (1000, 32, 32)
    assert np.array_equal(np.bincount(ds.bin_index), np.full(10, 100))


def test_bins_follow_std(rng):
    ds = build_dataset(["synthetic:2"], 200, 4, rng)
    std = ds.patches.std(axis=(1, 2))
    means = [std[ds.bin_index == b].mean() for b in range(4)]
    assert means == sorted(means)


def test_constant_images_degenerate(rng, caplog):
    with caplog.at_level(logging.WARNING):
        ds = build_dataset([np.full((64, 64), 9.0)], 20, 5, rng)
    assert "one bin" in caplog.text
    assert np.all(ds.patches.std(axis=(1, 2)) == 0)
    assert set(ds.bin_index) == {0}


def test_missing_path(rng, tmp_path):
    with pytest.raises(FileNotFoundError):
        build_dataset([str(tmp_path / "nope.png")], 10, 2, rng)


def test_empty_directory(rng, tmp_path):
    with pytest.raises(DatasetError):
        build_dataset([str(tmp_path)], 10, 2, rng)


def test_too_small(rng):
    with pytest.raises(DatasetError):
        build_dataset([np.zeros((16, 16))], 10, 2, rng)


def test_load_formats(tmp_path, rng):
    from PIL import Image

    img = rng.integers(0, 256, (40, 48)).astype(np.uint8)
    imageio.write_pgm(tmp_path / "a.pgm", img)
    Image.fromarray(img).save(tmp_path / "b.png")
    rgb = np.stack([img] * 3, axis=-1)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    assert np.array_equal(load_gray(tmp_path / "a.pgm"), img)
    assert np.array_equal(load_gray(tmp_path / "b.png"), img)
    np.testing.assert_allclose(load_gray(tmp_path / "c.png"), img, atol=1e-9)
    ds = build_dataset([str(tmp_path)], 12, 3, rng)
    assert len(ds) == 12


def test_deterministic():
    a = build_dataset(["synthetic:1"], 50, 5, np.random.default_rng(3))
    b = build_dataset(["synthetic:1"], 50, 5, np.random.default_rng(3))
    assert np.array_equal(a.patches, b.patches)
