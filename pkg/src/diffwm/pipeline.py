"""Full-image protocol, metrics, evaluation grid and diffusion analysis.

A 1024-bit (32x32) watermark is tiled 2x2 into a 64x64 plane, one bit per
8x8 block of a 512x512 cover. The cover is cut into 32x32 sub-images, each
embedded with its aligned 4x4 piece of the plane. Extraction runs the same
tiling backwards and votes over the copies of each bit.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import apply_real_attack
from .losses import ssim as _ssim
from .networks import (PIXEL_MAX, EmbedderParams, ExtractorParams, embed_forward,
                       extract_forward, threshold_bits)
from .tensorcore import ConvLayer, ShapeError
from .transforms import build_dct_matrix, channel_mix
from .tensorcore import space_to_depth

log = logging.getLogger(__name__)

WM_SIDE = 32
CSV_HEADER = ("image", "alpha", "attack", "level", "psnr_db", "ssim", "ber")


# --------------------------------------------------------------------------
# watermark plane

@dataclass
class WatermarkPlane:
    plane: np.ndarray           # (PH, PW) bits
    redundancy_map: np.ndarray  # (n_bits, copies, 2) plane coordinates per source bit

    @property
    def copies(self) -> int:
        return self.redundancy_map.shape[1]


def _as_wm_grid(wm) -> np.ndarray:
    wm = np.asarray(wm)
    if wm.size != WM_SIDE * WM_SIDE:
        raise ShapeError(f"watermark must hold {WM_SIDE * WM_SIDE} bits, got {wm.size}")
    wm = wm.reshape(WM_SIDE, WM_SIDE)
    if not np.all((wm == 0) | (wm == 1)):
        raise ValueError("watermark values must be 0 or 1")
    return wm.astype(np.uint8)


def build_redundant_plane(wm, plane_shape: tuple[int, int] = (64, 64)) -> WatermarkPlane:
    """Tile the 32x32 watermark over the plane (2x2 copies for a 64x64 plane)."""
    wm = _as_wm_grid(wm)
    ph, pw = plane_shape
    if ph % WM_SIDE or pw % WM_SIDE:
        raise ShapeError(f"plane {ph}x{pw} is not a multiple of the {WM_SIDE}x{WM_SIDE} watermark")
    ty, tx = ph // WM_SIDE, pw // WM_SIDE
    plane = np.tile(wm, (ty, tx))
    r, c = np.divmod(np.arange(WM_SIDE * WM_SIDE), WM_SIDE)
    offs = [(a * WM_SIDE, b * WM_SIDE) for a in range(ty) for b in range(tx)]
    rmap = np.stack([np.stack([r + oy, c + ox], axis=-1) for oy, ox in offs], axis=1)
    return WatermarkPlane(plane, rmap)


def vote(plane_probs: np.ndarray, hard: bool = False) -> np.ndarray:
    """Combine the copies of each bit into the 1024-bit watermark.

    Soft voting sums the copies' probabilities and compares with half the copy
    count; hard voting counts thresholded copies. Ties resolve to 1.
    """
    ph, pw = plane_probs.shape
    ty, tx = ph // WM_SIDE, pw // WM_SIDE
    copies = plane_probs.reshape(ty, WM_SIDE, tx, WM_SIDE).transpose(0, 2, 1, 3)
    if hard:
        copies = threshold_bits(copies).astype(np.float64)
    total = copies.sum(axis=(0, 1))
    return (total >= ty * tx / 2).astype(np.uint8).ravel()


# --------------------------------------------------------------------------
# tiling

def _tiles(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // side, side, w // side, side).transpose(0, 2, 1, 3).reshape(-1, side, side)


def _untile(tiles: np.ndarray, h: int, w: int) -> np.ndarray:
    side = tiles.shape[-1]
    return tiles.reshape(h // side, w // side, side, side).transpose(0, 2, 1, 3).reshape(h, w)


def _geometry(shape, params):
    m, n = params.transform.m, params.transform.n
    side = 4 * m  # 4x4 blocks per sub-image
    if side != 4 * n:
        raise ShapeError("full-image protocol assumes square blocks")
    h, w = shape
    if h % side or w % side:
        raise ShapeError(f"image {h}x{w} is not a multiple of the {side}x{side} sub-image size")
    return side, (h // m, w // n)


def center_crop(img: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Largest centred crop whose sides are multiples of ``multiple``."""
    h, w = img.shape
    nh, nw = h - h % multiple, w - w % multiple
    if (nh, nw) == (h, w):
        return img
    if nh == 0 or nw == 0:
        raise ShapeError(f"image {h}x{w} is smaller than {multiple}x{multiple}")
    log.warning("center-cropping %dx%d image to %dx%d", h, w, nh, nw)
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top:top + nh, left:left + nw]


def embed_image(cover: np.ndarray, wm, embedder: EmbedderParams, alpha: float = 1.0) -> np.ndarray:
    """Watermark a grayscale image; returns an 8-bit image of the same size."""
    cover = np.asarray(cover)
    if cover.ndim != 2:
        raise ShapeError(f"cover must be 2-d, got {cover.shape}")
    side, plane_shape = _geometry(cover.shape, embedder)
    plane = build_redundant_plane(wm, plane_shape).plane
    sub_wm = _tiles(plane, side // embedder.transform.m)
    marked, _ = embed_forward(_tiles(cover.astype(np.float64), side), sub_wm, embedder, alpha)
    out = _untile(np.asarray(marked, dtype=np.float64), *cover.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def extract_image(image: np.ndarray, extractor: ExtractorParams, hard_vote: bool = False):
    """Recover the 1024 watermark bits; returns ``(bits, plane_probs)``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"image must be 2-d, got {image.shape}")
    side, plane_shape = _geometry(image.shape, extractor)
    probs = extract_forward(_tiles(image.astype(np.float64), side), extractor)
    plane_probs = _untile(np.asarray(probs, dtype=np.float64), *plane_shape)
    if plane_shape[0] % WM_SIDE or plane_shape[1] % WM_SIDE:
        raise ShapeError(f"plane {plane_shape} cannot hold whole copies of a 32x32 watermark")
    return vote(plane_probs, hard_vote), plane_probs


# --------------------------------------------------------------------------
# metrics

def ber(w, w_prime) -> float:
    w, w_prime = np.asarray(w).ravel(), np.asarray(w_prime).ravel()
    if w.size != w_prime.size:
        raise ValueError(f"bit strings differ in length: {w.size} vs {w_prime.size}")
    return float(np.count_nonzero(w != w_prime)) / w.size


def psnr(ref, img, max_value: float = PIXEL_MAX) -> float:
    """Peak SNR in dB; ``inf`` for identical images."""
    ref = np.asarray(ref, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    if ref.shape != img.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {img.shape}")
    sse = float(np.sum((ref - img) ** 2))
    if sse == 0:
        return math.inf
    return 10 * math.log10(ref.size * max_value ** 2 / sse)


def image_ssim(ref, img) -> float:
    """Global (single-window) SSIM on a unit dynamic range."""
    return float(_ssim(np.asarray(ref, dtype=np.float64) / PIXEL_MAX,
                       np.asarray(img, dtype=np.float64) / PIXEL_MAX))


# --------------------------------------------------------------------------
# evaluation grid

@dataclass
class EvaluationReport:
    rows: list[tuple] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for name, alpha, attack, level, p, s, b in self.rows:
            writer.writerow([name, f"{alpha:g}", attack, f"{level:g}", f"{p:.6f}", f"{s:.6f}", f"{b:.6f}"])
        return buf.getvalue()

    def mean(self, alpha=None, attack=None, level=None, column="ber") -> float:
        col = CSV_HEADER.index(column)
        vals = [r[col] for r in self.rows
                if (alpha is None or r[1] == alpha) and (attack is None or r[2] == attack)
                and (level is None or r[3] == level)]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> str:
        """Text table shaped like a robustness table: one row per alpha."""
        if not self.rows:
            return "no results\n"
        alphas = sorted({r[1] for r in self.rows}, reverse=True)
        cols = list(dict.fromkeys((r[2], r[3]) for r in self.rows))
        head = ["alpha", "PSNR", "SSIM"] + [f"{a}({l:g})" for a, l in cols]
        lines = ["  ".join(f"{h:>14}" for h in head)]
        for a in alphas:
            cells = [f"{a:g}", f"{self.mean(a, column='psnr_db'):.2f}", f"{self.mean(a, column='ssim'):.4f}"]
            cells += [f"{100 * self.mean(a, k, l):.1f}%" for k, l in cols]
            lines.append("  ".join(f"{c:>14}" for c in cells))
        for name, err in self.failures:
            lines.append(f"failed: {name}: {err}")
        lines.append("SSIM is global (single window); BER in percent.")
        return "\n".join(lines) + "\n"


def _load_image(item):
    from .data import load_gray

    if isinstance(item, tuple):
        return item
    path = Path(item)
    return path.name, load_gray(path)


def evaluate_grid(images, embedder: EmbedderParams, extractor: ExtractorParams, alphas,
                  attack_grid, wm_trials: int = 20, seed: int = 0,
                  mask: np.ndarray | None = None) -> EvaluationReport:
    """Average BER per (image, alpha, attack, level) over random watermarks.

    ``images`` holds paths or ``(name, array)`` pairs; ``attack_grid`` holds
    ``(kind, [levels])``. Every (image, trial) shares its watermark and its
    attack noise across alphas, so rows differing only in alpha are directly
    comparable.
    """
    report = EvaluationReport()
    for ii, item in enumerate(images):
        try:
            name, img = _load_image(item)
            img = center_crop(np.asarray(img, dtype=np.float64))
        except (OSError, ValueError) as exc:
            name = str(item[0] if isinstance(item, tuple) else item)
            log.error("skipping %s: %s", name, exc)
            report.failures.append((name, str(exc)))
            continue
        cover = np.clip(np.round(img), 0, 255).astype(np.uint8)
        wms = [np.random.default_rng([seed, ii, t]).integers(0, 2, WM_SIDE * WM_SIDE)
               for t in range(wm_trials)]
        for alpha in alphas:
            marked = [embed_image(cover, wm, embedder, alpha) for wm in wms]
            p = float(np.mean([psnr(cover, mk) for mk in marked]))
            s = float(np.mean([image_ssim(cover, mk) for mk in marked]))
            for ki, (kind, levels) in enumerate(attack_grid):
                for li, level in enumerate(levels):
                    bers = []
                    for t, (wm, mk) in enumerate(zip(wms, marked)):
                        rng = np.random.default_rng([seed, ii, t, ki, li, 1])
                        attacked = apply_real_attack(mk, kind, level, rng, mask=mask)
                        bits, _ = extract_image(attacked, extractor)
                        bers.append(ber(wm, bits))
                    report.rows.append((name, float(alpha), kind, float(level), p, s, float(np.mean(bers))))
    return report


# --------------------------------------------------------------------------
# diffusion analysis

def params_as(params, dtype):
    """Copy of a parameter set with weights cast to ``dtype``."""
    layers = [ConvLayer(l.kind, l.weight.astype(dtype),
                        None if l.bias is None else l.bias.astype(dtype), l.activation)
              for l in params.layers]
    return type(params)(params.transform, layers)


def diffusion_pattern(embedder: EmbedderParams, bit_position: tuple[int, int] = (0, 0),
                      cover_value: float = 128.0, alpha: float = 1.0) -> np.ndarray:
    """Difference between embedding a single 1 and the all-zero watermark.

    Computed in float64 on a constant 32x32 cover, without rounding.
    """
    emb = params_as(embedder, np.float64)
    m, n = emb.transform.m, emb.transform.n
    cover = np.full((4 * m, 4 * n), float(cover_value))
    one = np.zeros((4, 4))
    i, j = bit_position
    one[i, j] = 1
    marked_one, _ = embed_forward(cover, one, emb, alpha)
    marked_zero, _ = embed_forward(cover, np.zeros((4, 4)), emb, alpha)
    return marked_one - marked_zero


def zigzag_order(n: int = 8) -> list[tuple[int, int]]:
    """JPEG zig-zag scan of an ``n x n`` block, from (0, 0) to (n-1, n-1)."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(n) if 0 <= s - i < n]
        order.extend(diag if s % 2 else diag[::-1])
    return order


def frequency_energy_curve(pattern: np.ndarray) -> np.ndarray:
    """Sum of |DCT coefficient| over the pattern's 8x8 blocks, in zig-zag order."""
    pattern = np.asarray(pattern, dtype=np.float64)
    if pattern.ndim != 2:
        raise ShapeError(f"pattern must be 2-d, got {pattern.shape}")
    spec = build_dct_matrix(8, 8)
    coefs = channel_mix(space_to_depth(pattern, 8, 8), spec.forward)  # (64, gh, gw)
    energy = np.abs(coefs).sum(axis=(1, 2)).reshape(8, 8)
    return np.array([energy[u, v] for u, v in zigzag_order(8)])
