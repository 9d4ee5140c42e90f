"""Image datasets: seeded synthetic scenes or a folder of PNG/PPM files."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .numerics import DTYPE

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | folder
    n: int = 256
    seed: int = 7
    path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def voronoi_image(rng: np.random.Generator, side: int) -> np.ndarray:
    k = int(rng.integers(4, 12))
    seeds = rng.uniform(0, side, size=(k, 2))
    colors = rng.uniform(0, 1, size=(k, 3))
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    img = colors[np.argmin(d, axis=-1)]
    # faint shading so regions are not perfectly flat
    grad = rng.normal(0, 0.1, size=(2, 3))
    img = img + (yy[..., None] / side - 0.5) * grad[0] + (xx[..., None] / side - 0.5) * grad[1]
    return np.clip(img, 0.0, 1.0)


def step_edge_image(rng: np.random.Generator, side: int) -> np.ndarray:
    n_edges = int(rng.integers(1, 4))
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    img = np.broadcast_to(rng.uniform(0, 1, 3), (side, side, 3)).copy()
    for _ in range(n_edges):
        theta = rng.uniform(0, 2 * math.pi)
        cy, cx = rng.uniform(0.2 * side, 0.8 * side, 2)
        side_mask = (yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta) > 0
        img[side_mask] = rng.uniform(0, 1, 3)
    return img


def synthetic_images(n: int, side: int, seed: int) -> torch.Tensor:
    """``n`` seeded images of shape (side, side, 3), alternating Voronoi / step-edge."""
    rng = np.random.default_rng(seed)
    imgs = [voronoi_image(rng, side) if i % 2 == 0 else step_edge_image(rng, side) for i in range(n)]
    return torch.as_tensor(np.stack(imgs), dtype=DTYPE)


def crop_geometry(w: int, h: int, target: int) -> tuple[int, int, int, int]:
    """Aspect-preserving resize size and center-crop offsets.

    Returns ``(new_w, new_h, left, top)``: the short side becomes ``target``.
    """
    s = target / min(w, h)
    new_w, new_h = max(target, round(w * s)), max(target, round(h * s))
    return new_w, new_h, (new_w - target) // 2, (new_h - target) // 2


def load_image(path: Path, target: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        new_w, new_h, left, top = crop_geometry(im.width, im.height, target)
        im = im.resize((new_w, new_h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[top:top + target, left:left + target]


def folder_images(path, target: int) -> torch.Tensor:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    imgs = []
    for f in sorted(root.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            imgs.append(load_image(f, target))
        except (UnidentifiedImageError, OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", f, e)
    if not imgs:
        raise ValueError(f"empty dataset: no readable images in {root}")
    return torch.as_tensor(np.stack(imgs), dtype=DTYPE)


def ingest_dataset(spec: DatasetSpec, resolution: int) -> torch.Tensor:
    """Load the images described by ``spec`` as an ``(N, res, res, 3)`` tensor in [0, 1]."""
    if spec.kind == "synthetic":
        if spec.n < 1:
            raise ValueError("empty dataset")
        return synthetic_images(spec.n, resolution, spec.seed)
    if spec.kind == "folder":
        if not spec.path:
            raise ValueError("folder dataset needs a path")
        return folder_images(spec.path, resolution)
    raise ValueError(f"unknown dataset kind {spec.kind!r}")
