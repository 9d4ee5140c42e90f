"""Finite-difference checks for every learnable parameter of the pipeline."""

from __future__ import annotations

import numpy as np
import torch

from .featurizer import FeaturizerSpec
from .numerics import DTYPE, GradCheckResult, ViewTransform, finite_difference_check
from .sharpen import SharpenParams, featsharp_combine
from .trainer import TrainConfig, UpsamplerModel, consistency_loss


def _perturb(module: torch.nn.Module, seed: int, scale: float) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for t in module.parameters():
            t.add_(scale * torch.randn(t.shape, generator=g, dtype=t.dtype))


def _tiny_config(seed: int) -> TrainConfig:
    # 8x8 hi-res grid: featurizer grid 4x4, factor 2
    spec = FeaturizerSpec(kind="wrapped", patch=2, channels=4, input_resolution=8, seed=seed, bias_scale=0.3)
    return TrainConfig(factor=2, upsampler="featsharp", residual="jbu", downsampler_k=5,
                       jbu_radius=2, seed=seed, featurizer=spec)


def _views() -> list[ViewTransform]:
    return [
        ViewTransform(scale=1.3, shift=(0.1, -0.05), rotation=0.2),
        ViewTransform(hflip=True, perspective=(0.03, -0.02, 0.0, 0.01, -0.03, 0.02, 0.01, 0.0)),
    ]


def gradient_suite(seed: int = 0, step: float = 1e-3) -> list[GradCheckResult]:
    """Central-difference check of the full consistency loss, parameter by parameter.

    Covers the JBU sigmas and range projector, every refinement-block weight
    (with and without attention), the de-bias grid and the downsampler. The
    zero-initialized weights are randomized first so no gradient is trivially
    zero.
    """
    cfg = _tiny_config(seed)
    model = UpsamplerModel(cfg)
    _perturb(model, seed + 1, 0.2)
    rng = np.random.default_rng(seed)
    images = torch.as_tensor(rng.uniform(size=(2, 16, 16, 3)), dtype=DTYPE)
    views = _views()

    def loss():
        return consistency_loss(model, images, views)

    results = finite_difference_check(loss, list(model.named_parameters()), step=step)

    # the linear ablation path is not part of the default block
    lin = SharpenParams(cfg.featurizer.channels, mode="linear", seed=seed)
    _perturb(lin, seed + 2, 0.2)
    res = torch.as_tensor(rng.normal(size=(8, 8, 4)), dtype=DTYPE)
    mosaic = torch.as_tensor(rng.normal(size=(8, 8, 4)), dtype=DTYPE)
    probe = torch.as_tensor(rng.normal(size=(8, 8, 4)), dtype=DTYPE)

    def lin_loss():
        return (featsharp_combine(res, mosaic, lin) * probe).sum()

    named = [(f"linear_mode.{n}", p) for n, p in lin.named_parameters() if n.startswith(("lin.", "norm1"))]
    results += finite_difference_check(lin_loss, named, step=step)
    return results
