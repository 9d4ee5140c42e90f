"""Learned attention downsampler (convex pooling back to featurizer resolution)."""

from __future__ import annotations

import torch

from .numerics import DTYPE, gather_windows, window_mix


class DownsamplerParams(torch.nn.Module):
    def __init__(self, channels: int, factor: int, k: int = 7):
        super().__init__()
        if factor < 1:
            raise ValueError("factor must be positive")
        if k % 2 == 0 or k < factor:
            raise ValueError(f"window k={k} must be odd and at least factor={factor}")
        self.factor = factor
        self.k = k
        self.salience = torch.nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        self.spatial_bias = torch.nn.Parameter(torch.zeros(k, k, dtype=DTYPE))


def attention_downsample(f_hr: torch.Tensor, p: DownsamplerParams, return_weights: bool = False):
    """Pool each ``factor x factor`` cell from a k x k window around it.

    Window logits are ``salience . feature + spatial_bias``; out-of-bounds
    members are dropped from the softmax, so every output is a convex
    combination of in-image hi-res vectors.
    """
    h, w = f_hr.shape[-3:-1]
    z, k = p.factor, p.k
    if h % z or w % z:
        raise ValueError(f"hi-res size {h}x{w} not divisible by factor {z}")
    lead = tuple(f_hr.shape[:-3])
    x = f_hr.reshape(-1, h, w, f_hr.shape[-1])
    before = (k - z) // 2
    pad = (before, k - z - before)
    score, valid = gather_windows((x @ p.salience).unsqueeze(-1), k, stride=z, pad=pad)
    logits = score.squeeze(-2) + p.spatial_bias.reshape(k * k)
    attn = torch.softmax(logits.masked_fill(~valid, float("-inf")), dim=-1)
    out = window_mix(attn, x, k, stride=z, pad=pad)
    out = out.reshape(*lead, *out.shape[1:])
    if return_weights:
        return out, attn
    return out
