"""Blind image watermarking with circular-convolution embedder and extractor networks.

Everything is plain numpy with hand-written backward passes.
"""

from .attacks import AttackMixture, AttackSpec, apply_differentiable_attack, apply_real_attack
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .networks import embed_forward, extract_forward, init_params
from .pipeline import (ber, diffusion_pattern, embed_image, evaluate_grid, extract_image,
                       frequency_energy_curve, psnr)
from .training import TrainConfig, preset, train
from .transforms import build_transform

__version__ = "0.1.0"

__all__ = [
    "AttackMixture", "AttackSpec", "Checkpoint", "TrainConfig",
    "apply_differentiable_attack", "apply_real_attack", "ber", "build_transform",
    "diffusion_pattern", "embed_forward", "embed_image", "evaluate_grid", "extract_forward",
    "extract_image", "frequency_energy_curve", "init_params", "load_checkpoint", "preset",
    "psnr", "save_checkpoint", "train",
]
