"""Montage previews as binary PPM files, one per scale.

PPM (P6) needs no third-party code on either end of the pipe: the
payload is raw 8-bit RGB, so a re-read differs from the source array by
at most one quantisation step. Tile outlines are burned into the pixels
to make the assembly geometry checkable at a glance; scale 0 draws a
single full-frame box.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import config as C
from . import montage as mon
from . import train as TR
from .seeding import PREVIEW, SeededRng

OUTLINE = (1.0, 0.35, 0.0)


def write_ppm(path: str, img: np.ndarray) -> None:
    """img: [3, H, W] floats in [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    _, h, w = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Inverse of write_ppm up to the 8-bit rounding, [3, H, W] float32."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        # whitespace-separated header tokens, # starts a comment line
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    flat = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return flat.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def outline_tiles(img: np.ndarray, grid: int) -> np.ndarray:
    """Draw one-pixel tile borders on a copy of a [3, H, W] image."""
    out = img.copy()
    _, h, w = out.shape
    if h % grid or w % grid:
        raise ValueError(f"{h}x{w} image does not split into a {grid} grid")
    color = np.array(OUTLINE, dtype=out.dtype).reshape(3, 1)
    sh, sw = h // grid, w // grid
    for r in range(grid):
        out[:, r * sh, :] = color
        out[:, (r + 1) * sh - 1, :] = color
    for c in range(grid):
        out[:, :, c * sw] = color
        out[:, :, (c + 1) * sw - 1] = color
    return out


def montage_previews(cfg: C.Config, out_dir: str) -> dict[int, dict]:
    """Write one outlined montage image per scale; returns, per scale,
    the written path and the exact array the file encodes."""
    C.validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _ = TR.load_datasets(cfg.data)
    n = 4 ** (cfg.train.levels - 1)
    if len(train_ds) < n:
        raise ValueError(f"need {n} images for a scale-{cfg.train.levels - 1} montage")
    batch = train_ds.images[:n]
    rng = SeededRng(cfg.train.seed, PREVIEW)
    results = {}
    for s in range(cfg.train.levels):
        boundary = cfg.train.boundary_k if cfg.train.boundary_k > 0 else None
        mb = mon.assemble(batch, s, rng.derive(s), boundary)
        img = outline_tiles(mb.images[0], mb.grid)
        path = out / f"montage_s{s}.ppm"
        write_ppm(str(path), img)
        results[s] = {"path": str(path), "image": img, "grid": mb.grid}
    return results
