"""Training patches: image loading, synthetic covers and variance-stratified sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio

log = logging.getLogger(__name__)

PATCH = 32
LUMA = (0.299, 0.587, 0.114)


class DatasetError(ValueError):
    pass


@dataclass
class PatchDataset:
    patches: np.ndarray          # (n, 32, 32) float
    bin_edges: np.ndarray        # std quantile edges used for stratification
    bin_index: np.ndarray        # (n,) bin of each patch

    def __len__(self):
        return len(self.patches)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    return rgb[..., :3] @ np.array(LUMA)


def synthetic_image(rng: np.random.Generator, size: int = 512) -> np.ndarray:
    """A random cover with smooth shading, hard-edged shapes and texture.

    Not a natural photograph, but it spans flat, edged and busy regions so the
    per-patch variance covers a wide range.
    """
    img = np.zeros((size, size))
    for sigma, weight in ((size / 8, 60.0), (size / 32, 25.0), (2.0, 6.0)):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        img += weight * field / (field.std() + 1e-12)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(int(rng.integers(4, 12))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 40, size / 5, 2)
        level = rng.uniform(-80, 80)
        if rng.random() < 0.5:
            shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[shape] += level
    # stripes / fine texture in a random window
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.integers(0, size - size // 4, 2)
        span = int(rng.integers(size // 8, size // 4))
        period = rng.uniform(3, 12)
        angle = rng.uniform(0, np.pi)
        wave = 30 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
        win = np.zeros_like(img, dtype=bool)
        win[y0:y0 + span, x0:x0 + span] = True
        img[win] += wave[win]
    lo, hi = np.percentile(img, [1, 99])
    img = (img - lo) / max(hi - lo, 1e-9)
    img = img * rng.uniform(150, 255) + rng.uniform(0, 40)
    return np.clip(np.round(img), 0, 255)


def load_gray(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return imageio.read_pgm(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64)
    return to_grayscale(arr)


def resolve_sources(sources, rng: np.random.Generator):
    """Yield grayscale float images from paths, arrays or ``synthetic:N`` specs."""
    for src in sources:
        if isinstance(src, np.ndarray):
            yield to_grayscale(src)
        elif isinstance(src, str) and src.startswith("synthetic:"):
            count = int(src.split(":", 1)[1] or 1)
            for _ in range(count):
                yield synthetic_image(rng)
        else:
            p = Path(src)
            files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
            if not files:
                raise DatasetError(f"no images under {p}")
            for f in files:
                if not f.exists():
                    raise FileNotFoundError(f)
                yield load_gray(f)


def build_dataset(sources, patch_count: int, bins: int, rng: np.random.Generator,
                  oversample: int = 4) -> PatchDataset:
    """Random 32x32 patches, balanced across patch-std quantile bins."""
    sources = list(sources)
    if not sources:
        raise DatasetError("at least one image source is required")
    if patch_count < 1 or bins < 1:
        raise DatasetError("patch_count and bins must be positive")
    images = [im for im in resolve_sources(sources, rng) if min(im.shape) >= PATCH]
    if not images:
        raise DatasetError("no source image is at least 32x32")

    want = patch_count * oversample
    per_image = np.full(len(images), want // len(images))
    per_image[: want % len(images)] += 1
    cands = []
    for im, k in zip(images, per_image):
        h, w = im.shape
        ys = rng.integers(0, h - PATCH + 1, size=k)
        xs = rng.integers(0, w - PATCH + 1, size=k)
        cands.extend(im[y:y + PATCH, x:x + PATCH] for y, x in zip(ys, xs))
    cands = np.stack(cands)
    std = cands.std(axis=(1, 2))

    edges = np.unique(np.quantile(std, np.linspace(0, 1, bins + 1)))
    if len(edges) - 1 < bins:
        if len(edges) <= 1:
            log.warning("all candidate patches share std %.3g; stratification collapses to one bin", std[0])
            edges = np.array([std.min(), std.max()])
        else:
            log.warning("only %d distinct std bins available (asked %d)", len(edges) - 1, bins)
        bins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, std, side="right") - 1, 0, bins - 1)

    quota = np.full(bins, patch_count // bins)
    quota[: patch_count % bins] += 1
    chosen, chosen_bin = [], []
    for b in range(bins):
        members = np.flatnonzero(idx == b)
        if len(members) < quota[b]:
            raise DatasetError(f"bin {b} has {len(members)} candidates, needs {quota[b]}")
        pick = rng.choice(members, size=quota[b], replace=False)
        chosen.append(pick)
        chosen_bin.append(np.full(quota[b], b))
    chosen = np.concatenate(chosen)
    return PatchDataset(cands[chosen].astype(np.float64), edges, np.concatenate(chosen_bin))
