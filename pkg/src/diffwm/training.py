"""End-to-end training of the embedder/extractor pair through the attack layer."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackMixture, AttackSpec, apply_differentiable_attack, sample_attack
from .data import PatchDataset
from .losses import SSIM_C1, SSIM_C2, bce_with_grad, ssim_with_grad
from .networks import (PIXEL_MAX, EmbedCache, EmbedderParams, ExtractCache, ExtractorParams,
                       embed_backward, embed_forward, extract_backward, extract_forward,
                       flatten_grads, init_params, param_arrays, threshold_bits)
from .transforms import TransformSpec, build_transform

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    block_m: int = 8
    block_n: int = 8
    patch: int = 32
    transform: str = "dct"
    iterations: int = 1_000_000
    learning_rate: float = 1e-4
    momentum: float = 0.98
    gamma: float = 0.75
    batch_size: int = 32
    seed: int = 0
    attack_mixture: AttackMixture = field(
        default_factory=lambda: AttackMixture.single(AttackSpec("identity")))
    ssim_c1: float = SSIM_C1
    ssim_c2: float = SSIM_C2
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.patch % self.block_m or self.patch % self.block_n:
            raise ValueError("patch size must be a multiple of the block size")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def wm_shape(self) -> tuple[int, int]:
        return self.patch // self.block_m, self.patch // self.block_n

    def to_text(self) -> str:
        """Canonical ``key = value`` lines, sorted by key."""
        items = dataclasses.asdict(self)
        items["attack_mixture"] = str(self.attack_mixture)
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(items.items()))

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(key, raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        return cls.from_mapping(values)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_INT_KEYS = {"block_m", "block_n", "patch", "iterations", "batch_size", "seed", "checkpoint_every"}
_FLOAT_KEYS = {"learning_rate", "momentum", "gamma", "ssim_c1", "ssim_c2"}


def _coerce(key, raw):
    if not isinstance(raw, str):
        return raw
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "attack_mixture":
        return AttackMixture.parse(raw)
    return raw


_MT_MIX = AttackMixture.uniform([AttackSpec("salt_pepper", 0.04), AttackSpec("gaussian_noise", 3),
                                 AttackSpec("jpeg_approx", 70), AttackSpec("smoothing", 3)])

PRESETS: dict[str, dict] = {
    "gt-net": dict(gamma=0.75, attack_mixture=AttackMixture.single(AttackSpec("gaussian_noise", 3))),
    "jt-net": dict(gamma=0.75, attack_mixture=AttackMixture.single(AttackSpec("jpeg_approx", 70))),
    "mt-net": dict(gamma=0.5, attack_mixture=_MT_MIX, iterations=2_000_000),
    # lr 1e-4 saturates the output clamp from a fresh init at this scale
    "overfit": dict(gamma=0.5, attack_mixture=AttackMixture.single(AttackSpec("identity")),
                    iterations=20_000, learning_rate=3e-5),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


# --------------------------------------------------------------------------
# optimiser

def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray],
                      buffers: list[np.ndarray], lr: float, mo: float) -> None:
    """Classical momentum, in place: ``v = mo*v + g; w -= lr*v``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; optimiser step aborted")
    for w, g, v in zip(params, grads, buffers):
        v *= mo
        v += g
        w -= lr * v


# --------------------------------------------------------------------------
# one forward/backward pass

@dataclass
class StepResult:
    loss: float
    ssim: np.ndarray
    bce: np.ndarray
    probs: np.ndarray
    emb_grads: list
    ext_grads: list


def loss_and_grads(emb: EmbedderParams, ext: ExtractorParams, covers, wms,
                   attack: AttackSpec, rng: np.random.Generator, gamma: float,
                   c1: float = SSIM_C1, c2: float = SSIM_C2) -> StepResult:
    """Mean batch loss ``gamma*(1-SSIM) + (1-gamma)*BCE`` and its parameter gradients."""
    covers = np.asarray(covers)
    batch = covers.shape[0]
    ecache, xcache = EmbedCache(), ExtractCache()
    marked, _ = embed_forward(covers, wms, emb, 1.0, ecache)
    attacked, actx = apply_differentiable_attack(marked, attack, rng)
    probs = extract_forward(attacked, ext, xcache)

    s, ds = ssim_with_grad(covers / PIXEL_MAX, marked / PIXEL_MAX, c1, c2)
    b, db = bce_with_grad(probs, wms)
    loss = float(np.mean(gamma * (1 - s) + (1 - gamma) * b))

    dtype = marked.dtype
    g_attacked, ext_grads = extract_backward(xcache, ext, ((1 - gamma) / batch * db).astype(dtype))
    g_marked = actx.backward(g_attacked) - (gamma / batch / PIXEL_MAX) * ds
    emb_grads = embed_backward(ecache, emb, g_marked.astype(dtype))
    return StepResult(loss, s, b, probs, emb_grads, ext_grads)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    config: TrainConfig
    embedder: EmbedderParams
    extractor: ExtractorParams
    buffers: list[np.ndarray]
    iteration: int
    rng: np.random.Generator

    def params(self) -> list[np.ndarray]:
        return param_arrays(self.embedder) + param_arrays(self.extractor)


def init_state(config: TrainConfig, transform: TransformSpec | None = None) -> TrainState:
    if transform is None:
        transform = build_transform(config.transform, config.block_m, config.block_n)
    emb, ext = init_params(config.seed, transform, dtype=np.dtype(config.dtype))
    state = TrainState(config, emb, ext, [], 0, np.random.default_rng([config.seed, 1]))
    state.buffers = [np.zeros_like(p) for p in state.params()]
    return state


@dataclass
class LogRow:
    iteration: int
    loss: float
    ssim: float
    bce: float
    ber: float
    attack: str
    wall_time: float


def train(config: TrainConfig, data: PatchDataset, state: TrainState | None = None,
          on_log: Callable[[LogRow], None] | None = None, log_every: int = 100,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run ``config.iterations`` SGD steps (continuing ``state`` if given)."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if state is None:
        state = init_state(config)
    dtype = np.dtype(config.dtype)
    patches = data.patches.astype(dtype)
    rng = state.rng
    wm_h, wm_w = config.wm_shape
    params = state.params()
    start = time.perf_counter()
    window: list[tuple] = []

    while state.iteration < config.iterations:
        idx = rng.integers(0, len(patches), size=config.batch_size)
        covers = patches[idx]
        wms = rng.integers(0, 2, size=(config.batch_size, wm_h, wm_w)).astype(dtype)
        attack = sample_attack(config.attack_mixture, rng)
        res = loss_and_grads(state.embedder, state.extractor, covers, wms, attack, rng,
                             config.gamma, config.ssim_c1, config.ssim_c2)
        if not np.isfinite(res.loss):
            raise DivergenceError(f"loss became non-finite at iteration {state.iteration}")
        grads = flatten_grads(res.emb_grads) + flatten_grads(res.ext_grads)
        sgd_momentum_step(params, grads, state.buffers, config.learning_rate, config.momentum)
        state.iteration += 1

        ber = float(np.mean(threshold_bits(res.probs) != wms))
        window.append((res.loss, float(res.ssim.mean()), float(res.bce.mean()), ber))
        if on_log is not None and (state.iteration % log_every == 0 or state.iteration == config.iterations):
            m = np.mean(window, axis=0)
            on_log(LogRow(state.iteration, *map(float, m), str(attack), time.perf_counter() - start))
            window.clear()
        if on_checkpoint is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def evaluate_patches(state_or_params, patches, rng: np.random.Generator,
                     attack: AttackSpec | None = None, alpha: float = 1.0, repeats: int = 1):
    """Mean (BER, SSIM) over ``patches`` with fresh random watermarks."""
    if isinstance(state_or_params, TrainState):
        emb, ext = state_or_params.embedder, state_or_params.extractor
    else:
        emb, ext = state_or_params
    attack = attack or AttackSpec("identity")
    patches = np.asarray(patches, dtype=np.float64)
    m, n = emb.transform.m, emb.transform.n
    bers, ssims = [], []
    for _ in range(repeats):
        wms = rng.integers(0, 2, size=(len(patches), patches.shape[1] // m, patches.shape[2] // n))
        marked, _ = embed_forward(patches, wms, emb, alpha)
        attacked, _ = apply_differentiable_attack(marked, attack, rng)
        probs = extract_forward(attacked, ext)
        bers.append(np.mean(threshold_bits(probs) != wms))
        ssims.append(np.mean(ssim_with_grad(patches / PIXEL_MAX, marked / PIXEL_MAX)[0]))
    return float(np.mean(bers)), float(np.mean(ssims))
