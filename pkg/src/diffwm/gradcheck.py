"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

import numpy as np

from .attacks import AttackSpec, apply_differentiable_attack
from .losses import bce_with_grad, ssim_with_grad
from .networks import EmbedderParams, ExtractorParams, flatten_grads, param_arrays
from .pipeline import params_as
from .tensorcore import ConvLayer, conv_backward, conv_forward, finite_difference_check
from .training import loss_and_grads

TOLERANCE = 1e-4
ABS_TOLERANCE = 1e-6
EPS = 1e-5
# Central differences in float64 carry ~1e-9 absolute rounding noise at the
# loss scales seen here, so relative error is only probed above this floor.
GRAD_FLOOR = 1e-4


def _probe(rng, grad, probes):
    """Random coordinates whose analytic gradient clears the noise floor."""
    grad = np.asarray(grad).ravel()
    big = np.flatnonzero(np.abs(grad) >= GRAD_FLOOR)
    if big.size == 0:
        return big
    return rng.choice(big, size=min(probes, big.size), replace=False)


def _small(rng, grad, probes):
    grad = np.asarray(grad).ravel()
    small = np.flatnonzero(np.abs(grad) < GRAD_FLOOR)
    if small.size == 0:
        return small
    return rng.choice(small, size=min(probes, small.size), replace=False)


def absolute_error(f, x, analytic_grad, indices, eps: float = EPS) -> float:
    """Max ``|analytic - numeric|`` over ``indices`` (for sub-floor gradients)."""
    x = np.array(x, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    worst = 0.0
    for i in indices:
        orig = x[i]
        x[i] = orig + eps
        fp = float(f(x))
        x[i] = orig - eps
        fm = float(f(x))
        x[i] = orig
        worst = max(worst, abs(g[i] - (fp - fm) / (2 * eps)))
    return worst


def _both(f, x, grad, rng, probes, eps):
    rel = finite_difference_check(f, x, grad, eps, _probe(rng, grad, probes))
    return rel, absolute_error(f, x, grad, _small(rng, grad, probes), eps)


def passed(result: tuple[float, float]) -> bool:
    rel, abs_err = result
    return rel < TOLERANCE and abs_err < ABS_TOLERANCE


def check_layer(layer: ConvLayer, x: np.ndarray, rng: np.random.Generator,
                probes: int = 3, eps: float = EPS) -> dict[str, tuple[float, float]]:
    """Check input, weight and bias gradients of one layer under a random linear readout."""
    readout = rng.standard_normal(conv_forward(x, layer).shape)
    gx, gw, gb = conv_backward(x, layer, readout)
    results = {}

    def f_input(v):
        return float(np.sum(readout * conv_forward(v.reshape(x.shape), layer)))

    results["input"] = _both(f_input, x, gx, rng, probes, eps)

    def f_weight(v):
        l = ConvLayer(layer.kind, v.reshape(layer.weight.shape), layer.bias, layer.activation)
        return float(np.sum(readout * conv_forward(x, l)))

    results["weight"] = _both(f_weight, layer.weight, gw, rng, probes, eps)
    if layer.bias is not None:
        def f_bias(v):
            l = ConvLayer(layer.kind, layer.weight, v, layer.activation)
            return float(np.sum(readout * conv_forward(x, l)))

        results["bias"] = _both(f_bias, layer.bias, gb, rng, probes, eps)
    return results


def check_attack(spec: AttackSpec, img: np.ndarray, seed: int, probes: int = 3,
                 eps: float = EPS) -> tuple[float, float]:
    """Gradient of a random readout of ``attack(img)`` with the attack's noise frozen."""
    rng = np.random.default_rng(seed + 1)
    out, ctx = apply_differentiable_attack(img, spec, np.random.default_rng(seed))
    readout = rng.standard_normal(out.shape)
    grad = ctx.backward(readout)

    def f(v):
        y, _ = apply_differentiable_attack(v.reshape(img.shape), spec, np.random.default_rng(seed))
        return float(np.sum(readout * y))

    return _both(f, img, grad, rng, probes, eps)


def check_ssim(ref: np.ndarray, img: np.ndarray, rng, probes: int = 3,
               eps: float = EPS) -> tuple[float, float]:
    _, grad = ssim_with_grad(ref, img)

    def f(v):
        return float(np.sum(ssim_with_grad(ref, v.reshape(img.shape))[0]))

    return _both(f, img, grad, rng, probes, eps)


def check_bce(probs: np.ndarray, bits: np.ndarray, rng, probes: int = 3,
              eps: float = EPS) -> tuple[float, float]:
    _, grad = bce_with_grad(probs, bits)

    def f(v):
        return float(np.sum(bce_with_grad(v.reshape(probs.shape), bits)[0]))

    return _both(f, probs, grad, rng, probes, eps)


def check_end_to_end(embedder: EmbedderParams, extractor: ExtractorParams, attack: AttackSpec,
                     seed: int = 0, gamma: float = 0.5, batch: int = 2, probes: int = 3,
                     eps: float = EPS) -> dict[str, tuple[float, float]]:
    """Finite-difference check of the full training loss per trainable array.

    Returns ``{"embedder.L1.weight": (max_rel_err, max_abs_err), ...}``; the
    relative error covers probes above the noise floor, the absolute error
    probes below it. Covers are drawn away from 0 and 255 so the output clamp
    stays inactive.
    """
    emb = params_as(embedder, np.float64)
    ext = params_as(extractor, np.float64)
    rng = np.random.default_rng(seed)
    m, n = emb.transform.m, emb.transform.n
    covers = rng.uniform(60, 195, size=(batch, 4 * m, 4 * n))
    wms = rng.integers(0, 2, size=(batch, 4, 4)).astype(np.float64)
    attack_seed = int(rng.integers(2**31))

    def loss(e, x):
        return loss_and_grads(e, x, covers, wms, attack, np.random.default_rng(attack_seed), gamma)

    res = loss(emb, ext)
    grads = flatten_grads(res.emb_grads) + flatten_grads(res.ext_grads)
    arrays = param_arrays(emb) + param_arrays(ext)
    names = _names("embedder", emb) + _names("extractor", ext)
    out = {}
    for name, arr, g in zip(names, arrays, grads):
        def f(v, arr=arr):
            saved = arr.copy()
            arr[...] = v.reshape(arr.shape)
            try:
                return loss(emb, ext).loss
            finally:
                arr[...] = saved

        out[name] = _both(f, arr, g, rng, probes, eps)
    return out


def _names(prefix, params):
    names = []
    for i, layer in enumerate(params.layers, 1):
        names.append(f"{prefix}.L{i}.weight")
        if layer.bias is not None:
            names.append(f"{prefix}.L{i}.bias")
    return names
