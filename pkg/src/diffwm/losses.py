"""Training losses: global SSIM, binary cross-entropy, and their mix."""

from __future__ import annotations

import numpy as np

from .tensorcore import ShapeError

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
LOG_FLOOR = 1e-12


def ssim_with_grad(ref, img, c1: float = SSIM_C1, c2: float = SSIM_C2):
    """Global SSIM over the last two axes and its gradient with respect to ``img``.

    Means, (population) variances and covariance are taken over the whole
    patch. Inputs are expected on a unit dynamic range. Returns
    ``(ssim, d ssim / d img)`` where ``ssim`` has the leading (batch) shape.
    """
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(img, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    axes = (-2, -1)
    n = x.shape[-2] * x.shape[-1]
    mx = x.mean(axis=axes, keepdims=True)
    my = y.mean(axis=axes, keepdims=True)
    dx, dy = x - mx, y - my
    vx = (dx * dx).mean(axis=axes, keepdims=True)
    vy = (dy * dy).mean(axis=axes, keepdims=True)
    cxy = (dx * dy).mean(axis=axes, keepdims=True)

    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = a1 * a2 / (b1 * b2)
    grad = s * (2 * mx / a1 + 2 * dx / a2 - 2 * my / b1 - 2 * dy / b2) / n
    return s[..., 0, 0], grad


def ssim(ref, img, c1: float = SSIM_C1, c2: float = SSIM_C2):
    return ssim_with_grad(ref, img, c1, c2)[0]


def bce_with_grad(probs, bits):
    """Summed binary cross-entropy over the last two axes and ``d/d probs``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(bits, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {y.shape}")
    p1 = np.maximum(p, LOG_FLOOR)
    p0 = np.maximum(1 - p, LOG_FLOOR)
    loss = -(y * np.log(p1) + (1 - y) * np.log(p0)).sum(axis=(-2, -1))
    grad = -y / p1 + (1 - y) / p0
    return loss, grad


def bce_loss(probs, bits):
    return bce_with_grad(probs, bits)[0]


def combined_loss(ssim_value, bce_value, gamma: float):
    """``gamma * (1 - SSIM) + (1 - gamma) * BCE``, minimised during training."""
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    return gamma * (1 - np.asarray(ssim_value)) + (1 - gamma) * np.asarray(bce_value)
