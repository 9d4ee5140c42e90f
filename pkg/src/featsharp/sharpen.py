"""The refinement block: windowed attention + SwiGLU over concatenated maps.

The residual-upsampled map and the tile mosaic are concatenated along the
channel axis, pushed through one pre-norm transformer block, and the first
``C`` channels are returned. Because the block is residual, a block that does
nothing returns the residual-upsampled input unchanged.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .numerics import DTYPE, window_dot, window_mix, window_valid

MODES = ("linear", "attention", "mlp", "attention+mlp")


def swiglu_hidden(dim: int) -> int:
    h = 4 * dim * 2 / 3
    return max(8, 8 * round(h / 8))


class Linear(torch.nn.Module):
    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, zero: bool = False):
        super().__init__()
        if zero:
            w = torch.zeros(d_in, d_out, dtype=DTYPE)
        else:
            w = torch.randn(d_in, d_out, generator=generator, dtype=DTYPE) / math.sqrt(d_in)
        self.weight = torch.nn.Parameter(w)
        self.bias = torch.nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x):
        return x @ self.weight + self.bias


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


class SharpenParams(torch.nn.Module):
    """Weights of the single refinement block over 2C-dim tokens.

    Output projections (attention ``proj`` and MLP ``down``, plus the linear
    ablation path) start at zero so the block is initially the identity.
    """

    def __init__(self, channels: int, window: int = 5, mode: str = "attention+mlp",
                 seed: int = 0, zero_init: bool = True):
        super().__init__()
        if window < 1 or window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.channels = channels
        self.window = window
        self.mode = mode
        d = 2 * channels
        hidden = swiglu_hidden(d)
        g = torch.Generator().manual_seed(seed)
        self.norm1 = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.norm2 = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.qkv = Linear(d, 3 * d, g)
        self.proj = Linear(d, d, g, zero=zero_init)
        self.gate = Linear(d, hidden, g)
        self.up = Linear(d, hidden, g)
        self.down = Linear(hidden, d, g, zero=zero_init)
        self.lin = Linear(d, d, g, zero=zero_init)


def local_attention(tokens: torch.Tensor, params: SharpenParams, w: int | None = None,
                    return_weights: bool = False):
    """Single-head attention where each position sees its w x w neighbourhood.

    Windows are clipped at the grid edge: out-of-bounds members are excluded
    from the softmax. Returns the attention-weighted values (before the output
    projection).
    """
    w = params.window if w is None else w
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window must be odd, got {w}")
    if not torch.isfinite(tokens).all():
        raise ValueError("tokens contain non-finite values")
    d = tokens.shape[-1]
    lead = tuple(tokens.shape[:-3])
    q, k, v = params.qkv(tokens.reshape(-1, *tokens.shape[-3:])).split(d, dim=-1)
    valid = window_valid(q.shape[1], q.shape[2], w)
    logits = window_dot(q, k, w) / math.sqrt(d)
    attn = torch.softmax(logits.masked_fill(~valid, float("-inf")), dim=-1)
    out = window_mix(attn, v, w)
    out = out.reshape(*lead, *out.shape[1:])
    if return_weights:
        return out, attn
    return out


def sharpen_block(x: torch.Tensor, params: SharpenParams) -> torch.Tensor:
    mode = params.mode
    if mode == "linear":
        return x + params.lin(rms_norm(x, params.norm1))
    if "attention" in mode:
        x = x + params.proj(local_attention(rms_norm(x, params.norm1), params))
    if "mlp" in mode:
        n = rms_norm(x, params.norm2)
        x = x + params.down(F.silu(params.gate(n)) * params.up(n))
    return x


def featsharp_combine(residual_up: torch.Tensor, mosaic: torch.Tensor, params: SharpenParams) -> torch.Tensor:
    if residual_up.shape != mosaic.shape:
        raise ValueError(f"shape mismatch: {tuple(residual_up.shape)} vs {tuple(mosaic.shape)}")
    c = residual_up.shape[-1]
    if c != params.channels:
        raise ValueError(f"params built for {params.channels} channels, got {c}")
    x = torch.cat([residual_up, mosaic], dim=-1)
    return sharpen_block(x, params)[..., :c]
