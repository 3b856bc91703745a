"""Float tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays laid out as ``(channels, height, width)``.
Every kernel also accepts a leading batch axis, ``(batch, channels, height,
width)``, which is how the networks call them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

POINTWISE = "pointwise_1x1"
CIRCULAR = "circular_2x2"
ACTIVATIONS = ("elu", "sigmoid", "identity")

# (dr, dc) taps of the 2x2 circular kernel, in weight-array order.
_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


@dataclass
class ConvLayer:
    kind: str
    weight: np.ndarray  # (n_out, n_in, kh, kw)
    bias: Optional[np.ndarray]
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in (POINTWISE, CIRCULAR):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        k = 1 if self.kind == POINTWISE else 2
        if self.weight.ndim != 4 or self.weight.shape[2:] != (k, k):
            raise ShapeError(f"{self.kind} expects a (out, in, {k}, {k}) weight, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.n_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.n_out},)")

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a 3-d or 4-d tensor, got shape {x.shape}")


def space_to_depth(image: np.ndarray, m: int, n: int) -> np.ndarray:
    """Rearrange ``m x n`` pixel blocks into ``m*n`` channels.

    Channel ``k`` at grid cell ``(bi, bj)`` holds pixel ``(bi*m + k // n,
    bj*n + k % n)``, i.e. blocks are scanned row-major. A leading batch axis
    is allowed: ``(B, H, W) -> (B, m*n, H/m, W/n)``.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if h % m or w % n:
        raise ShapeError(f"{h}x{w} image is not divisible into {m}x{n} blocks")
    lead = image.shape[:-2]
    t = image.reshape(*lead, h // m, m, w // n, n)
    # (..., bi, r, bj, c) -> (..., r, c, bi, bj)
    nd = len(lead)
    t = t.transpose(*range(nd), nd + 1, nd + 3, nd, nd + 2)
    return np.ascontiguousarray(t.reshape(*lead, m * n, h // m, w // n))


def depth_to_space(t: np.ndarray, m: int, n: int) -> np.ndarray:
    """Exact inverse of :func:`space_to_depth`."""
    t = np.asarray(t)
    if t.ndim < 3:
        raise ShapeError(f"expected at least 3 dimensions, got {t.shape}")
    c, gh, gw = t.shape[-3:]
    if c != m * n:
        raise ShapeError(f"tensor has {c} channels, block {m}x{n} needs {m * n}")
    lead = t.shape[:-3]
    nd = len(lead)
    x = t.reshape(*lead, m, n, gh, gw)
    x = x.transpose(*range(nd), nd + 2, nd, nd + 3, nd + 1)
    return np.ascontiguousarray(x.reshape(*lead, gh * m, gw * n))


def _gather_taps(x: np.ndarray, kind: str) -> np.ndarray:
    """Stack the inputs each output position sees, as ``(B, n_in*taps, H*W)``."""
    b, c, h, w = x.shape
    if kind == POINTWISE:
        return x.reshape(b, c, h * w)
    shifted = [np.roll(x, (-dr, -dc), axis=(2, 3)) for dr, dc in _TAPS]
    # order (c, tap) so it matches weight.reshape(n_out, n_in*4)
    return np.stack(shifted, axis=2).reshape(b, c * 4, h * w)


def _scatter_taps(g: np.ndarray, kind: str, shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_gather_taps`."""
    b, c, h, w = shape
    if kind == POINTWISE:
        return g.reshape(shape)
    g = g.reshape(b, c, 4, h, w)
    out = np.zeros(shape, dtype=g.dtype)
    for t, (dr, dc) in enumerate(_TAPS):
        out += np.roll(g[:, :, t], (dr, dc), axis=(2, 3))
    return out


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))
    if activation == "sigmoid":
        # split by sign so exp never overflows
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    return z


def _activation_grad(out: np.ndarray, activation: str) -> np.ndarray | None:
    """Derivative of the activation, expressed through its output."""
    if activation == "elu":
        # e^z for z < 0 equals out + 1 there
        return np.where(out > 0, 1.0, out + 1).astype(out.dtype, copy=False)
    if activation == "sigmoid":
        return out * (1 - out)
    return None


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Stride-1 convolution followed by the layer's activation.

    ``circular_2x2`` reads taps at ``(row + dr) mod H, (col + dc) mod W`` for
    ``dr, dc in {0, 1}``, so spatial size is preserved.
    """
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if c != layer.n_in:
        raise ShapeError(f"layer expects {layer.n_in} input channels, got {c}")
    cols = _gather_taps(xb, layer.kind)
    z = np.matmul(layer.weight.reshape(layer.n_out, -1), cols)
    if layer.bias is not None:
        z += layer.bias[:, None]
    out = _activate(z, layer.activation).reshape(b, layer.n_out, h, w)
    return out[0] if squeeze else out


def conv_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray,
                  out: np.ndarray | None = None):
    """Gradients of :func:`conv_forward` with respect to input, weight and bias.

    ``out`` is the forward output; passing it avoids recomputing the forward
    pass. Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is
    ``None`` for bias-free layers.
    """
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    b, c, h, w = xb.shape
    if c != layer.n_in or gb.shape != (b, layer.n_out, h, w):
        raise ShapeError(f"grad_out {gb.shape} does not match layer output for input {xb.shape}")
    if out is None:
        out = conv_forward(xb, layer)
    ob, _ = _as_batch(out)

    g = gb.reshape(b, layer.n_out, h * w)
    act = _activation_grad(ob.reshape(b, layer.n_out, h * w), layer.activation)
    if act is not None:
        g = g * act

    cols = _gather_taps(xb, layer.kind)
    k = cols.shape[1]
    # fixed reduction order over (batch, position)
    g_flat = g.transpose(1, 0, 2).reshape(layer.n_out, b * h * w)
    cols_flat = cols.transpose(1, 0, 2).reshape(k, b * h * w)
    grad_w = (g_flat @ cols_flat.T).reshape(layer.weight.shape)
    grad_b = g_flat.sum(axis=1) if layer.bias is not None else None

    grad_cols = np.matmul(layer.weight.reshape(layer.n_out, k).T, g)
    grad_x = _scatter_taps(grad_cols, layer.kind, xb.shape)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def tiled_valid_conv(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Circular conv evaluated the slow way: tile 3x3, valid-correlate, crop.

    Reference path for checking :func:`conv_forward`; loops over taps
    explicitly and never calls ``np.roll``.
    """
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    big = np.tile(xb, (1, 1, 3, 3))
    kh, kw = layer.weight.shape[2:]
    z = np.zeros((b, layer.n_out, h, w), dtype=np.result_type(xb, layer.weight))
    for dr in range(kh):
        for dc in range(kw):
            window = big[:, :, h + dr:2 * h + dr, w + dc:2 * w + dc]
            z += np.einsum("oc,bchw->bohw", layer.weight[:, :, dr, dc], window)
    if layer.bias is not None:
        z += layer.bias[None, :, None, None]
    out = _activate(z, layer.activation)
    return out[0] if squeeze else out


def finite_difference_check(f: Callable[[np.ndarray], float], x: np.ndarray,
                            analytic_grad: np.ndarray, eps: float = 1e-5,
                            indices: Iterable[int] | None = None) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    Per coordinate the error is ``|a - n| / max(1e-8, |n|)`` with
    ``n = (f(x + eps) - f(x - eps)) / (2 eps)``. ``indices`` restricts the
    probe to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if indices is None:
        indices = range(x.size)
    worst = 0.0
    for i in indices:
        orig = x[i]
        x[i] = orig + eps
        fp = float(f(x))
        x[i] = orig - eps
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic_grad[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst
