"""Attack layers.

Two families live here. The differentiable attacks run inside training on
float images and return a context whose ``backward`` maps the upstream
gradient through the attack with every random draw frozen. The real attacks
run at evaluation time on 8-bit images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .tensorcore import ShapeError

BLOCK = 8

# Baseline JPEG luminance quantisation table (ITU-T T.81, Annex K).
BASE_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

DIFFERENTIABLE_KINDS = ("identity", "gaussian_noise", "uniform_noise", "salt_pepper",
                        "block_crop", "smoothing", "jpeg_approx")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    param: float = 0.0

    def __post_init__(self):
        k, p = self.kind, self.param
        if k not in DIFFERENTIABLE_KINDS:
            raise ValueError(f"unknown attack kind {k!r}")
        if k in ("gaussian_noise", "uniform_noise") and p < 0:
            raise ValueError(f"{k} needs a non-negative parameter, got {p}")
        if k in ("salt_pepper", "block_crop") and not 0 <= p <= 1:
            raise ValueError(f"{k} needs a fraction in [0, 1], got {p}")
        if k == "smoothing" and (p < 1 or p != int(p) or int(p) % 2 == 0):
            raise ValueError(f"smoothing window must be an odd integer >= 1, got {p}")
        if k == "jpeg_approx" and not (1 <= p <= 100 and p == int(p)):
            raise ValueError(f"JPEG quality must be an integer in [1, 100], got {p}")

    def __str__(self):
        return self.kind if self.kind == "identity" else f"{self.kind}:{self.param:g}"

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        kind, _, param = text.strip().partition(":")
        return cls(kind, float(param) if param else 0.0)


@dataclass(frozen=True)
class AttackMixture:
    entries: tuple[tuple[AttackSpec, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("attack mixture is empty")
        probs = [p for _, p in self.entries]
        if any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
            raise ValueError(f"mixture probabilities must be >= 0 and sum to 1, got {probs}")

    @classmethod
    def single(cls, spec: AttackSpec) -> "AttackMixture":
        return cls(((spec, 1.0),))

    @classmethod
    def uniform(cls, specs) -> "AttackMixture":
        specs = list(specs)
        return cls(tuple((s, 1.0 / len(specs)) for s in specs))

    def __str__(self):
        return ";".join(f"{spec}@{p:.17g}" for spec, p in self.entries)

    @classmethod
    def parse(cls, text: str) -> "AttackMixture":
        entries = []
        for item in text.split(";"):
            spec, _, p = item.rpartition("@")
            entries.append((AttackSpec.parse(spec), float(p)))
        return cls(tuple(entries))


def sample_attack(mix: AttackMixture, rng: np.random.Generator) -> AttackSpec:
    """Roulette-wheel pick of one mixture entry."""
    cum = np.cumsum([p for _, p in mix.entries])
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return mix.entries[min(i, len(mix.entries) - 1)][0]


# --------------------------------------------------------------------------
# JPEG helpers

def build_quant_matrix(quality: int) -> np.ndarray:
    """Luminance table for an IJG-style quality factor."""
    if not 1 <= quality <= 100 or quality != int(quality):
        raise ValueError(f"quality must be an integer in [1, 100], got {quality}")
    quality = int(quality)
    # integer arithmetic as in libjpeg's jpeg_quality_scaling
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    q = (BASE_LUMA * scale + 50) // 100
    return np.clip(q, 1, 255).astype(np.int64)


def dct8_matrix() -> np.ndarray:
    """Orthonormal 8-point DCT-II matrix ``C`` so that ``C @ x`` is the DCT."""
    u = np.arange(BLOCK)[:, None]
    x = np.arange(BLOCK)[None, :]
    c = np.sqrt(2.0 / BLOCK) * np.cos((2 * x + 1) * u * np.pi / (2 * BLOCK))
    c[0] /= np.sqrt(2.0)
    return c


_C8 = dct8_matrix()


def _blocks(img: np.ndarray) -> np.ndarray:
    """``(..., H, W) -> (..., H/8, W/8, 8, 8)`` view-free copy."""
    h, w = img.shape[-2:]
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"image {h}x{w} is not divisible into 8x8 blocks")
    lead = img.shape[:-2]
    nd = len(lead)
    b = img.reshape(*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return b.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3)


def _unblocks(b: np.ndarray) -> np.ndarray:
    lead = b.shape[:-4]
    nd = len(lead)
    gh, gw = b.shape[-4:-2]
    img = b.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3)
    return np.ascontiguousarray(img.reshape(*lead, gh * BLOCK, gw * BLOCK))


def block_dct(img: np.ndarray) -> np.ndarray:
    """Blockwise orthonormal DCT of ``img - 128``, as ``(..., gh, gw, 8, 8)``."""
    return _C8 @ _blocks(np.asarray(img, dtype=np.float64) - 128.0) @ _C8.T


def block_idct(coefs: np.ndarray) -> np.ndarray:
    return _unblocks(_C8.T @ coefs @ _C8) + 128.0


def jpeg_approx(img: np.ndarray, quality: int, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> np.ndarray:
    """Rounding replaced by additive ``U[-0.5, 0.5] * Q`` noise in the DCT domain.

    ``noise`` overrides the random draw (shape ``(..., H/8, W/8, 8, 8)``);
    passing zeros makes the attack an exact identity up to float error.
    """
    q = build_quant_matrix(quality).astype(np.float64)
    coefs = block_dct(img)
    if noise is None:
        noise = rng.uniform(-0.5, 0.5, size=coefs.shape)
    return block_idct(coefs + noise * q).astype(np.asarray(img).dtype, copy=False)


def jpeg_quantize(img: np.ndarray, quality: int) -> np.ndarray:
    """Real quantise/dequantise round trip (float output, not rounded to 8 bit)."""
    q = build_quant_matrix(quality).astype(np.float64)
    coefs = block_dct(img)
    return block_idct(np.round(coefs / q) * q)


# --------------------------------------------------------------------------
# differentiable attacks

@dataclass
class AttackContext:
    """Frozen state of one attack call; ``backward`` is the transposed Jacobian."""
    spec: AttackSpec
    backward: Callable[[np.ndarray], np.ndarray]


def _reflect_index(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="reflect")


def _box_filter(img: np.ndarray, a: int) -> np.ndarray:
    p = a // 2
    h, w = img.shape[-2:]
    ri, ci = _reflect_index(h, p), _reflect_index(w, p)
    padded = img[..., ri, :][..., :, ci]
    out = np.zeros_like(img)
    for dr in range(a):
        for dc in range(a):
            out += padded[..., dr:dr + h, dc:dc + w]
    return out / (a * a)


def _box_filter_adjoint(g: np.ndarray, a: int) -> np.ndarray:
    p = a // 2
    h, w = g.shape[-2:]
    g = g / (a * a)
    padded = np.zeros(g.shape[:-2] + (h + 2 * p, w + 2 * p), dtype=g.dtype)
    for dr in range(a):
        for dc in range(a):
            padded[..., dr:dr + h, dc:dc + w] += g
    # fold the reflected border back onto its source pixels
    ri, ci = _reflect_index(h, p), _reflect_index(w, p)
    rows = np.zeros(g.shape[:-2] + (h, w + 2 * p), dtype=g.dtype)
    for src, r in enumerate(ri):
        rows[..., r, :] += padded[..., src, :]
    out = np.zeros_like(g)
    for src, c in enumerate(ci):
        out[..., :, c] += rows[..., :, src]
    return out


def _identity_backward(g):
    return g


def apply_differentiable_attack(img: np.ndarray, spec: AttackSpec,
                                rng: np.random.Generator) -> tuple[np.ndarray, AttackContext]:
    """Apply ``spec`` to a float image or ``(B, H, W)`` batch.

    All randomness is drawn here, once, so the returned context differentiates
    the exact function that produced the output.
    """
    img = np.asarray(img)
    if not np.all(np.isfinite(img)):
        raise ValueError("attack input contains non-finite values")
    kind, p = spec.kind, spec.param

    if kind == "identity":
        return img.copy(), AttackContext(spec, _identity_backward)

    if kind == "gaussian_noise":
        out = img + rng.normal(0.0, p, size=img.shape) if p > 0 else img.copy()
        return out.astype(img.dtype, copy=False), AttackContext(spec, _identity_backward)

    if kind == "uniform_noise":
        out = img + rng.uniform(-p, p, size=img.shape)
        return out.astype(img.dtype, copy=False), AttackContext(spec, _identity_backward)

    if kind == "salt_pepper":
        hit = rng.random(img.shape) < p
        salt = rng.random(img.shape) < 0.5
        out = np.where(hit, np.where(salt, 255.0, 0.0), img).astype(img.dtype)
        return out, AttackContext(spec, lambda g: np.where(hit, 0, g))

    if kind == "block_crop":
        h, w = img.shape[-2:]
        if h % BLOCK or w % BLOCK:
            raise ShapeError(f"image {h}x{w} is not divisible into 8x8 blocks")
        lead = img.shape[:-2]
        nb = (h // BLOCK) * (w // BLOCK)
        k = math.ceil(p * nb)
        keep = np.ones(lead + (nb,), dtype=bool)
        for idx in np.ndindex(*lead):
            keep[idx + (rng.choice(nb, size=k, replace=False),)] = False
        mask = keep.reshape(lead + (h // BLOCK, w // BLOCK))
        mask = np.repeat(np.repeat(mask, BLOCK, axis=-2), BLOCK, axis=-1)
        return np.where(mask, img, 0).astype(img.dtype), AttackContext(spec, lambda g: np.where(mask, g, 0))

    if kind == "smoothing":
        a = int(p)
        return _box_filter(img, a), AttackContext(spec, lambda g: _box_filter_adjoint(g, a))

    if kind == "jpeg_approx":
        return jpeg_approx(img, int(p), rng), AttackContext(spec, _identity_backward)

    raise ValueError(f"unknown attack kind {kind!r}")


# --------------------------------------------------------------------------
# evaluation-time attacks on 8-bit images

REAL_KINDS = ("identity", "gaussian_noise", "salt_pepper", "crop", "grid_crop",
              "pattern", "jpeg", "gaussian_blur", "sharpen", "median", "resize")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def horizontal_bands(shape: tuple[int, int], lines: int, thickness: int = 4) -> np.ndarray:
    """Boolean mask of ``lines`` evenly spaced horizontal bands."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for i in range(int(lines)):
        top = int((i + 1) * h / (lines + 1)) - thickness // 2
        mask[max(top, 0):top + thickness, :] = True
    return mask


def apply_real_attack(img: np.ndarray, kind: str, level: float = 0.0,
                      rng: np.random.Generator | None = None,
                      mask: np.ndarray | None = None, fill: int = 0) -> np.ndarray:
    """Evaluation attack on an 8-bit grayscale image.

    Levels follow the usual table units: noise sigma in pixel values,
    salt & pepper / crop / grid crop in percent, pattern in number of lines,
    JPEG quality, blur and sharpen radius (Gaussian sigma), median window,
    resize scale.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-d grayscale image, got {img.shape}")
    if kind not in REAL_KINDS:
        raise ValueError(f"unknown attack {kind!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    x = img.astype(np.float64)
    h, w = img.shape

    if kind == "identity":
        return img.astype(np.uint8).copy()
    if kind == "gaussian_noise":
        if level < 0:
            raise ValueError("noise sigma must be >= 0")
        return _to_u8(x + rng.normal(0, level, size=x.shape))
    if kind == "salt_pepper":
        frac = _percent(level)
        hit = rng.random(x.shape) < frac
        salt = rng.random(x.shape) < 0.5
        return np.where(hit, np.where(salt, 255, 0), img).astype(np.uint8)
    if kind == "crop":
        frac = _percent(level)
        side_h = int(round(h * math.sqrt(frac)))
        side_w = int(round(frac * h * w / side_h)) if side_h else 0
        out = img.astype(np.uint8).copy()
        if side_h and side_w:
            top = int(rng.integers(0, h - side_h + 1))
            left = int(rng.integers(0, w - side_w + 1))
            out[top:top + side_h, left:left + side_w] = fill
        return out
    if kind == "grid_crop":
        frac = _percent(level)
        if h % BLOCK or w % BLOCK:
            raise ShapeError(f"image {h}x{w} is not divisible into 8x8 blocks")
        nb = (h // BLOCK) * (w // BLOCK)
        chosen = rng.choice(nb, size=int(math.floor(frac * nb)), replace=False)
        out = img.astype(np.uint8).copy()
        for b in chosen:
            r, c = divmod(int(b), w // BLOCK)
            out[r * BLOCK:(r + 1) * BLOCK, c * BLOCK:(c + 1) * BLOCK] = fill
        return out
    if kind == "pattern":
        if mask is None:
            if level < 0:
                raise ValueError("line count must be >= 0")
            m = horizontal_bands((h, w), int(level))
        else:
            m = np.asarray(mask) != 0
            if m.shape != img.shape:
                raise ShapeError(f"mask shape {m.shape} != image shape {img.shape}")
        return np.where(m, 255, img).astype(np.uint8)
    if kind == "jpeg":
        return _to_u8(jpeg_quantize(x, int(level)))
    if kind == "gaussian_blur":
        if level <= 0:
            raise ValueError("blur radius must be positive")
        return _to_u8(ndimage.gaussian_filter(x, sigma=level, mode="reflect"))
    if kind == "sharpen":
        if level <= 0:
            raise ValueError("sharpen radius must be positive")
        blurred = ndimage.gaussian_filter(x, sigma=level, mode="reflect")
        return _to_u8(2 * x - blurred)
    if kind == "median":
        size = int(level)
        if size < 1 or size % 2 == 0:
            raise ValueError("median window must be an odd integer >= 1")
        return ndimage.median_filter(img.astype(np.uint8), size=size, mode="reflect")
    if kind == "resize":
        return _resize_back(img, level)
    raise AssertionError(kind)


def _percent(level: float) -> float:
    if not 0 <= level <= 100:
        raise ValueError(f"percentage must be in [0, 100], got {level}")
    return level / 100.0


def _resize_back(img: np.ndarray, scale: float) -> np.ndarray:
    from PIL import Image

    if scale <= 0:
        raise ValueError("resize scale must be positive")
    h, w = img.shape
    small = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    if small == (w, h):
        return img.astype(np.uint8).copy()
    im = Image.fromarray(img.astype(np.uint8))
    im = im.resize(small, Image.BILINEAR).resize((w, h), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)
