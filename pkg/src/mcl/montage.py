"""Montage assembly: downsample, shuffle across the batch, and tile.

At scale s each image is bilinearly downsampled by 2**s, the batch is
shuffled by a seeded permutation, and consecutive groups of 4**s
subimages are tiled row-major into full-size montage images. The batch
therefore shrinks by 4**s while every pixel budget stays constant.
Assembly is pure copying after the downsample, so disassembly restores
the downsampled originals exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import gaussian_boundary_mask
from .seeding import SeededRng
from .tensor import bilinear_resize_array


@dataclass
class MontageBatch:
    """images: [B/4**s, C, H, W] montage images.
    src_ids: [B] source index of the subimage at each global tile slot;
    slot k = montage_index * 4**s + row * 2**s + col, rows scanned
    raster order within each montage image."""

    images: np.ndarray
    src_ids: np.ndarray
    scale: int
    grid: int
    sub_h: int
    sub_w: int

    @property
    def n_montages(self) -> int:
        return self.images.shape[0]

    @property
    def n_subimages(self) -> int:
        return self.src_ids.shape[0]


def assemble(batch: np.ndarray, scale: int, rng: SeededRng,
             boundary_k: float | None = None) -> MontageBatch:
    """Build montage images from [B, C, H, W] at the given scale.

    boundary_k, when set, multiplies each downsampled subimage by a
    Gaussian window of that relative width before tiling, fading out
    content near the artificial seams.
    """
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    B, C, H, W = batch.shape
    r = 2 ** scale
    group = r * r
    if B % group:
        raise ValueError(f"batch size {B} not divisible by {group} at scale {scale}")
    if H % r or W % r:
        raise ValueError(f"image size {H}x{W} not divisible by grid {r}")
    h, w = H // r, W // r

    ds = bilinear_resize_array(batch, h, w)
    if boundary_k is not None:
        ds = ds * gaussian_boundary_mask(h, w, boundary_k).astype(ds.dtype)

    perm = rng.generator().permutation(B)
    tiles = ds[perm]
    images = tiles.reshape(B // group, r, r, C, h, w) \
        .transpose(0, 3, 1, 4, 2, 5) \
        .reshape(B // group, C, H, W)
    return MontageBatch(images=np.ascontiguousarray(images),
                        src_ids=perm.astype(np.int64),
                        scale=scale, grid=r, sub_h=h, sub_w=w)


def disassemble(mb: MontageBatch) -> np.ndarray:
    """Cut montage images back into subimages, in source index order."""
    n, C, H, W = mb.images.shape
    r = mb.grid
    tiles = mb.images.reshape(n, C, r, mb.sub_h, r, mb.sub_w) \
        .transpose(0, 2, 4, 1, 3, 5) \
        .reshape(n * r * r, C, mb.sub_h, mb.sub_w)
    out = np.empty_like(tiles)
    out[mb.src_ids] = tiles
    return out


def subimage_boxes(mb: MontageBatch, map_h: int, map_w: int) -> list[tuple[int, int, int, int]]:
    """Pixel boxes (x0, y0, x1, y1) of each tile on a feature map of the
    given size, raster order. The map must split evenly into the grid."""
    r = mb.grid
    if map_h % r or map_w % r:
        raise ValueError(f"map {map_h}x{map_w} not divisible into a {r}x{r} grid")
    bh, bw = map_h // r, map_w // r
    return [(j * bw, i * bh, (j + 1) * bw, (i + 1) * bh)
            for i in range(r) for j in range(r)]
