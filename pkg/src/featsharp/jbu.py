"""Joint bilateral upsampling and the prime-factorized upsampler stack."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, bilinear_resample, check_grid, resize, window_dot, window_mix, window_offsets, window_valid


def prime_factors(z: int) -> list[int]:
    out, d = [], 2
    while d * d <= z:
        while z % d == 0:
            out.append(d)
            z //= d
        d += 1
    if z > 1:
        out.append(z)
    return out


def build_stack(z: int) -> list[int]:
    """Ascending prime factors of ``z``; the upsampling stages applied in order."""
    if not isinstance(z, (int, np.integer)) or z < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {z!r}")
    return prime_factors(int(z))


class JbuParams(torch.nn.Module):
    """Learnable state of one JBU stage.

    Sigmas are stored as logs so they stay positive. The range projector is
    two 1x1 affine layers with a GELU in between.
    """

    def __init__(self, guidance_dim: int = 3, key_dim: int = 32, radius: int = 3,
                 sigma_spatial: float = 1.0, sigma_range: float = 1.0, seed: int = 0):
        super().__init__()
        if radius < 0:
            raise ValueError("radius must be non-negative")
        self.radius = radius
        g = torch.Generator().manual_seed(seed)
        self.log_sigma_spatial = torch.nn.Parameter(torch.tensor(math.log(sigma_spatial), dtype=DTYPE))
        self.log_sigma_range = torch.nn.Parameter(torch.tensor(math.log(sigma_range), dtype=DTYPE))
        self.w1 = torch.nn.Parameter(torch.randn(guidance_dim, key_dim, generator=g, dtype=DTYPE) / math.sqrt(guidance_dim))
        self.b1 = torch.nn.Parameter(torch.zeros(key_dim, dtype=DTYPE))
        self.w2 = torch.nn.Parameter(torch.randn(key_dim, key_dim, generator=g, dtype=DTYPE) / math.sqrt(key_dim))
        self.b2 = torch.nn.Parameter(torch.zeros(key_dim, dtype=DTYPE))

    @property
    def sigma_spatial(self) -> torch.Tensor:
        return self.log_sigma_spatial.exp()

    @property
    def sigma_range(self) -> torch.Tensor:
        return self.log_sigma_range.exp()

    def range_proj(self, guidance: torch.Tensor) -> torch.Tensor:
        return F.gelu(guidance @ self.w1 + self.b1) @ self.w2 + self.b2


def _flat(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    return x.reshape(-1, *x.shape[-3:]), tuple(x.shape[:-3])


def jbu_weights(guidance: torch.Tensor, p: JbuParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized bilateral weights for every output pixel.

    Returns ``(weights, valid)`` where weights is ``(N, H, W, K)`` over the
    (2r+1)^2 window members and ``valid`` marks in-bounds members. Members
    outside the image get weight zero.
    """
    size = 2 * p.radius + 1
    h, _ = _flat(p.range_proj(guidance))
    valid = window_valid(h.shape[1], h.shape[2], size)
    logits = window_dot(h, h, size) / p.sigma_range ** 2
    k_range = torch.softmax(logits.masked_fill(~valid, float("-inf")), dim=-1)
    off = torch.as_tensor(window_offsets(size), dtype=guidance.dtype)
    k_spatial = torch.exp(-(off ** 2).sum(1) / (2 * p.sigma_spatial ** 2))
    w = k_range * k_spatial
    return w / w.sum(-1, keepdim=True), valid


def jbu_upsample(f_lr: torch.Tensor, guidance: torch.Tensor, p: JbuParams, factor: int,
                 return_weights: bool = False):
    """Upsample ``f_lr`` by ``factor`` with guidance-driven bilateral weights.

    The low-res values of each window member are read by bilinear lookup at
    its coarse coordinate (a bilinear pre-upsample), then mixed with the
    normalized product of the range softmax and the spatial Gaussian.
    """
    if factor < 2:
        raise ValueError("factor must be at least 2")
    check_grid(f_lr, "f_lr")
    if not torch.isfinite(guidance).all():
        raise ValueError("guidance contains non-finite values")
    h, w = f_lr.shape[-3:-1]
    gh, gw = guidance.shape[-3:-1]
    if (gh, gw) != (h * factor, w * factor) or guidance.shape[:-3] != f_lr.shape[:-3]:
        raise ValueError(f"size mismatch: guidance {tuple(guidance.shape)} for features {tuple(f_lr.shape)} x{factor}")
    up, lead = _flat(bilinear_resample(f_lr, gh, gw))
    weights, _ = jbu_weights(guidance, p)
    out = window_mix(weights, up, 2 * p.radius + 1)
    out = out.reshape(*lead, *out.shape[1:])
    if return_weights:
        return out, weights
    return out


class JbuStack(torch.nn.Module):
    """Independent JBU stages, one per prime factor of ``z`` (smallest first)."""

    def __init__(self, z: int, radius: int = 3, key_dim: int = 32, seed: int = 0):
        super().__init__()
        self.plan = build_stack(z)
        self.stages = torch.nn.ModuleList(
            JbuParams(key_dim=key_dim, radius=radius, seed=seed + i) for i in range(len(self.plan))
        )

    def forward(self, f_lr: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return jbu_stack_upsample(f_lr, image, list(self.stages), self.plan)


def stage_guidance(image: torch.Tensor, side_h: int, side_w: int) -> torch.Tensor:
    ih, iw = image.shape[-3:-1]
    if ih >= side_h and iw >= side_w and (ih % side_h or iw % side_w):
        raise ValueError(f"image {ih}x{iw} does not downsample cleanly to {side_h}x{side_w}")
    return resize(image, side_h, side_w)


def jbu_stack_upsample(f_lr: torch.Tensor, image: torch.Tensor, params: list[JbuParams], plan: list[int]) -> torch.Tensor:
    if len(params) != len(plan):
        raise ValueError("one JbuParams per stage required")
    out = f_lr
    for p, factor in zip(params, plan):
        h, w = out.shape[-3:-1]
        guidance = stage_guidance(image, h * factor, w * factor)
        out = jbu_upsample(out, guidance, p, factor)
    return out
