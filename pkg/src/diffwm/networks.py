"""Embedding and extraction networks.

Embedder: space-to-depth -> transform -> concat watermark channel -> 1x1 conv
-> four 2x2 circular convs -> inverse transform -> depth-to-space, added to
the cover through a strength factor. Extractor: space-to-depth -> transform
-> 1x1 conv -> three 2x2 circular convs -> 1x1 sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import (CIRCULAR, POINTWISE, ConvLayer, ShapeError, conv_backward,
                         conv_forward, depth_to_space, space_to_depth)
from .transforms import TransformSpec, channel_mix

HIDDEN = 64
PIXEL_MAX = 255.0


@dataclass
class EmbedderParams:
    transform: TransformSpec
    layers: list[ConvLayer]

    def __post_init__(self):
        kinds = [l.kind for l in self.layers]
        if kinds != [POINTWISE] + [CIRCULAR] * 4:
            raise ValueError(f"embedder layer kinds must be 1x1 + 4 circular, got {kinds}")
        if self.layers[0].n_in != self.transform.n_t + 1:
            raise ShapeError("first embedder layer must take n_T + 1 channels")
        if self.layers[-1].n_out != self.transform.n_t:
            raise ShapeError("last embedder layer must emit n_T channels")


@dataclass
class ExtractorParams:
    transform: TransformSpec
    layers: list[ConvLayer]

    def __post_init__(self):
        kinds = [l.kind for l in self.layers]
        if kinds != [POINTWISE] + [CIRCULAR] * 3 + [POINTWISE]:
            raise ValueError(f"extractor layer kinds must be 1x1 + 3 circular + 1x1, got {kinds}")
        head = self.layers[-1]
        if head.n_out != 1 or head.activation != "sigmoid":
            raise ValueError("extractor head must be a single sigmoid neuron")


def _glorot_layer(rng, kind, n_in, n_out, activation, dtype):
    k = 1 if kind == POINTWISE else 2
    fan_in, fan_out = n_in * k * k, n_out * k * k
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(n_out, n_in, k, k)).astype(dtype)
    return ConvLayer(kind, w, np.zeros(n_out, dtype=dtype), activation)


def init_params(seed: int, transform: TransformSpec, dtype=np.float64,
                hidden: int = HIDDEN) -> tuple[EmbedderParams, ExtractorParams]:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    nt = transform.n_t
    emb = [_glorot_layer(rng, POINTWISE, nt + 1, hidden, "elu", dtype)]
    emb += [_glorot_layer(rng, CIRCULAR, hidden, hidden, "elu", dtype) for _ in range(3)]
    emb.append(_glorot_layer(rng, CIRCULAR, hidden, nt, "identity", dtype))
    ext = [_glorot_layer(rng, POINTWISE, nt, hidden, "elu", dtype)]
    ext += [_glorot_layer(rng, CIRCULAR, hidden, hidden, "elu", dtype) for _ in range(3)]
    ext.append(_glorot_layer(rng, POINTWISE, hidden, 1, "sigmoid", dtype))
    return EmbedderParams(transform, emb), ExtractorParams(transform, ext)


@dataclass
class EmbedCache:
    cover: np.ndarray | None = None
    alpha: float = 1.0
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    pre_clamp: np.ndarray | None = None


@dataclass
class ExtractCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def _check_patch(x, m, n, what):
    if x.ndim not in (2, 3):
        raise ShapeError(f"{what} must be (H, W) or (B, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    if h % m or w % n:
        raise ShapeError(f"{what} of size {h}x{w} is not divisible into {m}x{n} blocks")


def embed_forward(cover, watermark, params: EmbedderParams, alpha: float = 1.0,
                  cache: EmbedCache | None = None):
    """Embed a bit grid into a cover patch.

    ``cover`` is ``(H, W)`` or ``(B, H, W)`` in pixel units; ``watermark`` is
    the matching ``(H/M, W/N)`` grid of 0/1 values. Returns ``(watermarked,
    residual)``; ``watermarked = clip(cover + alpha * residual, 0, 255)``.
    """
    spec = params.transform
    dtype = params.layers[0].weight.dtype
    cover = np.asarray(cover, dtype=dtype)
    wm = np.asarray(watermark)
    _check_patch(cover, spec.m, spec.n, "cover")
    grid = (cover.shape[-2] // spec.m, cover.shape[-1] // spec.n)
    if wm.shape != cover.shape[:-2] + grid:
        raise ShapeError(f"watermark shape {wm.shape} != {cover.shape[:-2] + grid}")
    if not np.all((wm == 0) | (wm == 1)):
        raise ValueError("watermark values must be 0 or 1")
    if alpha < 0:
        raise ValueError("strength factor must be non-negative")

    x = channel_mix(space_to_depth(cover, spec.m, spec.n), spec.forward)
    x = np.concatenate([x, wm.astype(dtype)[..., None, :, :]], axis=-3)
    for layer in params.layers:
        y = conv_forward(x, layer)
        if cache is not None:
            cache.inputs.append(x)
            cache.outputs.append(y)
        x = y
    residual = depth_to_space(channel_mix(x, spec.inverse), spec.m, spec.n)
    pre = cover + alpha * residual
    if cache is not None:
        cache.cover = cover
        cache.alpha = alpha
        cache.pre_clamp = pre
    return np.clip(pre, 0.0, PIXEL_MAX), residual


def embed_backward(cache: EmbedCache, params: EmbedderParams, grad_watermarked):
    """Back-propagate ``dL/d(watermarked)`` to per-layer ``(dW, db)`` pairs."""
    spec = params.transform
    inside = (cache.pre_clamp >= 0) & (cache.pre_clamp <= PIXEL_MAX)
    g = np.where(inside, grad_watermarked, 0) * cache.alpha
    g = channel_mix(space_to_depth(g, spec.m, spec.n), spec.inverse.T)
    grads = []
    for layer, x, y in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.outputs)):
        g, gw, gb = conv_backward(x, layer, g, out=y)
        grads.append((gw, gb))
    return grads[::-1]


def extract_forward(patch, params: ExtractorParams, cache: ExtractCache | None = None) -> np.ndarray:
    """Bit probabilities, one per block: ``(H, W) -> (H/M, W/N)``."""
    spec = params.transform
    dtype = params.layers[0].weight.dtype
    patch = np.asarray(patch, dtype=dtype)
    _check_patch(patch, spec.m, spec.n, "patch")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite values")
    x = channel_mix(space_to_depth(patch, spec.m, spec.n), spec.forward)
    for layer in params.layers:
        y = conv_forward(x, layer)
        if cache is not None:
            cache.inputs.append(x)
            cache.outputs.append(y)
        x = y
    return x[..., 0, :, :]


def extract_backward(cache: ExtractCache, params: ExtractorParams, grad_probs):
    """Returns ``(dL/d(patch), [(dW, db), ...])``."""
    spec = params.transform
    g = np.asarray(grad_probs)[..., None, :, :]
    grads = []
    for layer, x, y in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.outputs)):
        g, gw, gb = conv_backward(x, layer, g, out=y)
        grads.append((gw, gb))
    g_patch = depth_to_space(channel_mix(g, spec.forward.T), spec.m, spec.n)
    return g_patch, grads[::-1]


def threshold_bits(probs, tau: float = 0.5) -> np.ndarray:
    """1 where ``prob >= tau``."""
    return (np.asarray(probs) >= tau).astype(np.uint8)


def param_arrays(params) -> list[np.ndarray]:
    """Trainable arrays in a fixed order: w0, b0, w1, b1, ..."""
    out = []
    for layer in params.layers:
        out.append(layer.weight)
        if layer.bias is not None:
            out.append(layer.bias)
    return out


def flatten_grads(grads) -> list[np.ndarray]:
    out = []
    for gw, gb in grads:
        out.append(gw)
        if gb is not None:
            out.append(gb)
    return out
