"""PCA projection of feature maps to RGB."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


@dataclass
class PcaProjection:
    mean: np.ndarray  # (C,)
    basis: np.ndarray  # (C, 3), orthonormal columns
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)


def _vectors(fm) -> np.ndarray:
    a = fm.detach().cpu().numpy() if isinstance(fm, torch.Tensor) else np.asarray(fm)
    return a.reshape(-1, a.shape[-1]).astype(np.float64)


def fit_pca(maps) -> PcaProjection:
    """Fit one projection on the union of ``maps`` so colours are comparable."""
    if isinstance(maps, (torch.Tensor, np.ndarray)):
        maps = [maps]
    v = np.concatenate([_vectors(m) for m in maps])
    if v.shape[1] < 3:
        raise ValueError("need at least 3 channels for an RGB projection")
    mean = v.mean(0)
    cov = np.cov(v - mean, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    basis = evecs[:, ::-1][:, :3].copy()
    # deterministic sign: largest-magnitude entry of each axis positive
    idx = np.argmax(np.abs(basis), axis=0)
    basis *= np.sign(basis[idx, np.arange(3)])
    proj = (v - mean) @ basis
    return PcaProjection(mean, basis, proj.min(0), proj.max(0))


def pca_rgb(fm, proj: PcaProjection | None = None) -> np.ndarray:
    """Project a feature map to an ``(H, W, 3)`` uint8 image.

    Components with zero range map to mid-gray.
    """
    if proj is None:
        proj = fit_pca(fm)
    a = fm.detach().cpu().numpy() if isinstance(fm, torch.Tensor) else np.asarray(fm)
    if a.shape[-1] < 3:
        raise ValueError("need at least 3 channels for an RGB projection")
    p = (a.reshape(-1, a.shape[-1]) - proj.mean) @ proj.basis
    span = proj.hi - proj.lo
    safe = np.where(span > 1e-12, span, 1.0)
    scaled = np.where(span > 1e-12, (p - proj.lo) / safe, 0.5)
    rgb = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    return rgb.reshape(*a.shape[:-1], 3)


def save_png(rgb: np.ndarray, path, scale: int = 1) -> None:
    im = Image.fromarray(rgb)
    if scale > 1:
        im = im.resize((rgb.shape[1] * scale, rgb.shape[0] * scale), Image.NEAREST)
    im.save(Path(path))
