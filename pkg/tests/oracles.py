"""Slow, loop-based reference implementations used as test oracles.

Each mirrors a formula directly, with no shared code from the package beyond
parameter containers, so agreement is evidence that the vectorized kernels are
right rather than consistently wrong.
"""

import math

import numpy as np
import torch


def bilinear_at(src: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample ``src`` (H, W, C) at continuous pixel coordinates, edge-clamped."""
    h, w, _ = src.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = y - y0, x - x0
    return ((1 - wy) * (1 - wx) * src[y0, x0] + (1 - wy) * wx * src[y0, x1]
            + wy * (1 - wx) * src[y1, x0] + wy * wx * src[y1, x1])


def range_features(guidance: np.ndarray, p) -> np.ndarray:
    """Two-layer range projector with exact-erf GELU, pixel by pixel."""
    w1, b1 = p.w1.detach().numpy(), p.b1.detach().numpy()
    w2, b2 = p.w2.detach().numpy(), p.b2.detach().numpy()
    h, w, _ = guidance.shape
    out = np.zeros((h, w, w2.shape[1]))
    for i in range(h):
        for j in range(w):
            a = guidance[i, j] @ w1 + b1
            a = 0.5 * a * (1.0 + np.vectorize(math.erf)(a / math.sqrt(2.0)))
            out[i, j] = a @ w2 + b2
    return out


def jbu_bruteforce(f_lr: np.ndarray, guidance: np.ndarray, p, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Joint bilateral upsampling evaluated pixel by pixel.

    Returns ``(output, weights)`` with weights ``(H, W, (2r+1)^2)``; members
    outside the image carry weight 0.
    """
    r = p.radius
    ss = p.sigma_spatial.item()
    sr = p.sigma_range.item()
    hl, wl, c = f_lr.shape
    hh, wh = hl * factor, wl * factor
    hproj = range_features(guidance, p)
    out = np.zeros((hh, wh, c))
    weights = np.zeros((hh, wh, (2 * r + 1) ** 2))
    for i in range(hh):
        for j in range(wh):
            members, logits, spatial = [], [], []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    qi, qj = i + dy, j + dx
                    if not (0 <= qi < hh and 0 <= qj < wh):
                        continue
                    members.append(((dy + r) * (2 * r + 1) + dx + r, qi, qj))
                    logits.append(hproj[i, j] @ hproj[qi, qj] / sr ** 2)
                    spatial.append(math.exp(-(dy * dy + dx * dx) / (2 * ss ** 2)))
            logits = np.array(logits)
            k_range = np.exp(logits - logits.max())
            k_range /= k_range.sum()
            wts = k_range * np.array(spatial)
            wts /= wts.sum()
            for wt, (slot, qi, qj) in zip(wts, members):
                # coarse coordinate of hi-res pixel center (qi, qj)
                val = bilinear_at(f_lr, (qi + 0.5) / factor - 0.5, (qj + 0.5) / factor - 0.5)
                out[i, j] += wt * val
                weights[i, j, slot] = wt
    return out, weights


def attention_oracle(tokens: np.ndarray, wq, bq, wk, bk, wv, bv, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global single-head attention over all positions with a boolean key mask.

    ``mask[p, q]`` says whether query p may attend to key q (flattened indices).
    """
    h, w, d = tokens.shape
    t = tokens.reshape(-1, d)
    q, k, v = t @ wq + bq, t @ wk + bk, t @ wv + bv
    logits = q @ k.T / math.sqrt(d)
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    return (a @ v).reshape(h, w, d), a


def window_mask(h: int, w: int, size: int) -> np.ndarray:
    r = (size - 1) // 2
    ys, xs = np.divmod(np.arange(h * w), w)
    return (np.abs(ys[:, None] - ys[None, :]) <= r) & (np.abs(xs[:, None] - xs[None, :]) <= r)


def downsample_oracle(f_hr: np.ndarray, salience: np.ndarray, bias: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell softmax pooling over the k x k window, loops only."""
    k = bias.shape[0]
    h, w, c = f_hr.shape
    ho, wo = h // factor, w // factor
    before = (k - factor) // 2
    out = np.zeros((ho, wo, c))
    attn = np.zeros((ho, wo, k * k))
    for i in range(ho):
        for j in range(wo):
            logits, vals, slots = [], [], []
            for a in range(k):
                for b in range(k):
                    y, x = i * factor - before + a, j * factor - before + b
                    if 0 <= y < h and 0 <= x < w:
                        logits.append(f_hr[y, x] @ salience + bias[a, b])
                        vals.append(f_hr[y, x])
                        slots.append(a * k + b)
            logits = np.array(logits)
            e = np.exp(logits - logits.max())
            e /= e.sum()
            out[i, j] = e @ np.array(vals)
            attn[i, j, slots] = e
    return out, attn


def as_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().numpy()
