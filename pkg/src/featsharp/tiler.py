"""Tile mosaics and the Tile / S2 baseline combiners."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .featurizer import DebiasBuffer, Featurizer, debias_apply, featurize
from .numerics import bilinear_resample


@dataclass
class TileGrid:
    u: int
    tile_features: list[torch.Tensor]  # u*u maps, row-major tile order

    def __post_init__(self):
        if self.u < 1:
            raise ValueError("u must be positive")
        if len(self.tile_features) != self.u * self.u:
            raise ValueError(f"expected {self.u * self.u} tiles, got {len(self.tile_features)}")
        shape = self.tile_features[0].shape
        if any(t.shape != shape for t in self.tile_features):
            raise ValueError("heterogeneous tiles")


def tile_bounds(side: int, u: int) -> list[tuple[int, int]]:
    """Floor-sized segments; the last one absorbs the remainder."""
    step = side // u
    return [(i * step, side if i == u - 1 else (i + 1) * step) for i in range(u)]


def make_tiles(image: torch.Tensor, u: int, r: int) -> list[torch.Tensor]:
    """Split ``image`` into u x u regions (row-major), each resized to r x r."""
    if u < 1:
        raise ValueError("u must be positive")
    h, w = image.shape[-3:-1]
    if h < u or w < u:
        raise ValueError(f"cannot split {h}x{w} image into {u}x{u} tiles")
    tiles = []
    for y0, y1 in tile_bounds(h, u):
        for x0, x1 in tile_bounds(w, u):
            tiles.append(bilinear_resample(image[..., y0:y1, x0:x1, :], r, r))
    return tiles


def stitch(tg: TileGrid) -> torch.Tensor:
    rows = [torch.cat(tg.tile_features[i * tg.u:(i + 1) * tg.u], dim=-2) for i in range(tg.u)]
    return torch.cat(rows, dim=-3)


def tile_features(featurizer: Featurizer, image: torch.Tensor, u: int,
                  debias: DebiasBuffer | None = None, post=None) -> torch.Tensor:
    """Featurize each tile (de-biased, then ``post``-processed) and stitch.

    ``post`` is typically PHI-S normalization.
    """
    tiles = make_tiles(image, u, featurizer.spec.input_resolution)
    # one batched encoder pass over all tiles
    f = debias_apply(featurize(featurizer, torch.stack(tiles)), debias)
    if post is not None:
        f = post(f)
    return stitch(TileGrid(u, list(f.unbind(0))))


def tile_upsample(featurizer: Featurizer, image: torch.Tensor, u: int,
                  debias: DebiasBuffer | None = None, post=None) -> torch.Tensor:
    """Tiling baseline: the stitched mosaic is the hi-res prediction."""
    return tile_features(featurizer, image, u, debias, post)


def featurizer_calls(u: int) -> int:
    """Encoder evaluations for the global view plus one level of u x u tiles."""
    return 1 + u * u


def s2_combine(lowres_up: torch.Tensor, mosaic: torch.Tensor, beta: float = 0.5) -> torch.Tensor:
    """Convex mix ``beta * lowres_up + (1 - beta) * mosaic``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if lowres_up.shape != mosaic.shape:
        raise ValueError(f"shape mismatch: {tuple(lowres_up.shape)} vs {tuple(mosaic.shape)}")
    if beta == 1.0:
        return lowres_up.clone()
    if beta == 0.0:
        return mosaic.clone()
    return beta * lowres_up + (1.0 - beta) * mosaic
