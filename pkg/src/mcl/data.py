"""Image sources: a procedural shapes corpus and a directory loader.

The procedural corpus is a stand-in for a natural-image collection that
is cheap enough to regenerate on every run. Each image composites one
to three antialiased shapes of a single class over a low-frequency
noise background; shape colours, positions, sizes and rotations are
drawn independently of the class so the label is carried by geometry
alone. Classes are assigned round-robin by index, which keeps the
histogram exactly balanced, and every image is a pure function of
(seed, index) so splits can be regenerated independently.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import DATASET, SeededRng
from .tensor import bilinear_resize_array

SHAPE_NAMES = ("circle", "ring", "square", "diamond", "triangle",
               "cross", "bar", "ellipse", "frame", "star")


@dataclass(frozen=True)
class Dataset:
    """images: [N, 3, H, W] float32 in [0, 1]; labels: [N] int64."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("one label per image required")

    def __len__(self) -> int:
        return self.images.shape[0]


def _rotated_coords(h, w, cx, cy, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx -= cx
    yy -= cy
    c, s = np.cos(theta), np.sin(theta)
    return c * xx + s * yy, -s * xx + c * yy


def _shape_sdf(kind: int, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Signed distance in pixels, negative inside; approximate distances
    are fine because only a one-pixel antialiasing band reads them."""
    ax, ay = np.abs(x), np.abs(y)
    if kind == 0:  # circle
        return np.hypot(x, y) - r
    if kind == 1:  # ring
        return np.abs(np.hypot(x, y) - r) - 0.30 * r
    if kind == 2:  # square
        return np.maximum(ax, ay) - 0.85 * r
    if kind == 3:  # diamond
        return (ax + ay - 1.2 * r) / np.sqrt(2.0)
    if kind == 4:  # triangle, point up
        k = np.sqrt(3.0)
        px, py = ax - r, -y + r / k
        flip = px + k * py > 0.0
        px2 = (px - k * py) / 2.0
        py2 = (-k * px - py) / 2.0
        px, py = np.where(flip, px2, px), np.where(flip, py2, py)
        px -= np.clip(px, -2.0 * r, 0.0)
        return -np.hypot(px, py) * np.sign(py)
    if kind == 5:  # cross
        arm = np.maximum(ax - 0.35 * r, ay - 1.1 * r)
        return np.minimum(arm, np.maximum(ay - 0.35 * r, ax - 1.1 * r))
    if kind == 6:  # bar
        return np.maximum(ax - 1.4 * r, ay - 0.4 * r)
    if kind == 7:  # ellipse
        return np.hypot(x / 1.6, y / 0.8) - 0.85 * r
    if kind == 8:  # frame
        return np.abs(np.maximum(ax, ay) - 0.85 * r) - 0.22 * r
    if kind == 9:  # star, four concave points
        return (ax ** (2.0 / 3.0) + ay ** (2.0 / 3.0)) ** 1.5 - 1.1 * r
    raise ValueError(f"unknown shape kind {kind}")


def _background(h: int, w: int, g: np.random.Generator) -> np.ndarray:
    coarse = g.uniform(0.15, 0.55, size=(3, 4, 4))
    return bilinear_resize_array(coarse[None], h, w)[0]


def render_image(h: int, w: int, class_id: int, rng: SeededRng) -> np.ndarray:
    """One [3, h, w] float32 image of class class_id in [0, 1]."""
    if not 0 <= class_id < len(SHAPE_NAMES):
        raise ValueError(f"class {class_id} outside the {len(SHAPE_NAMES)} shapes")
    g = rng.generator()
    img = _background(h, w, g)
    for _ in range(int(g.integers(1, 4))):
        cx = g.uniform(0.25, 0.75) * w
        cy = g.uniform(0.25, 0.75) * h
        r = g.uniform(0.13, 0.22) * min(h, w)
        theta = g.uniform(-0.35, 0.35)
        hue, sat, val = g.uniform(0, 1), g.uniform(0.55, 1.0), g.uniform(0.65, 1.0)
        color = np.array(colorsys.hsv_to_rgb(hue, sat, val)).reshape(3, 1, 1)
        x, y = _rotated_coords(h, w, cx, cy, theta)
        alpha = np.clip(0.5 - _shape_sdf(class_id % len(SHAPE_NAMES), x, y, r),
                        0.0, 1.0)[None]
        img = img * (1.0 - alpha) + color * alpha
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_split(n: int, classes: int, h: int, w: int, rng: SeededRng,
                   offset: int = 0) -> Dataset:
    """Images offset..offset+n-1 of the deterministic corpus stream."""
    if classes > len(SHAPE_NAMES):
        raise ValueError(f"at most {len(SHAPE_NAMES)} classes available")
    images = np.empty((n, 3, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for j in range(n):
        i = offset + j
        labels[j] = i % classes
        images[j] = render_image(h, w, int(labels[j]), rng.derive(i))
    return Dataset(images=images, labels=labels, n_classes=classes)


def generate_toy_dataset(n_train: int, n_eval: int, classes: int,
                         h: int, w: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/eval splits from one seeded stream."""
    rng = SeededRng(seed, DATASET)
    train = generate_split(n_train, classes, h, w, rng, offset=0)
    evals = generate_split(n_eval, classes, h, w, rng, offset=n_train)
    return train, evals


def load_image_directory(root: str, h: int, w: int) -> Dataset:
    """Read class-per-subdirectory images, resized to (h, w).

    Sorted subdirectory names define the class ids; any format Pillow
    understands is accepted. Pixels come back as float32 in [0, 1].
    """
    from PIL import Image

    base = Path(root)
    class_dirs = sorted(d for d in base.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    images, labels = [], []
    for cls, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"class directory {d} is empty")
        for p in files:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB").resize((w, h), Image.BILINEAR))
            images.append(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(cls)
    return Dataset(images=np.stack(images), labels=np.array(labels, dtype=np.int64),
                   n_classes=len(class_dirs))
