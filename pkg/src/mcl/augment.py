"""Stochastic image augmentation for two-view pretraining.

Images are numpy [C, H, W] float arrays in [0, 1]. Each image/view pair
gets its own derived random stream, and every op draws from that stream
in a fixed order whether or not it fires, so one image's augmentation
never depends on batch composition and the two views of a pair can be
made to differ in a single op's probability without desynchronizing the
rest of the draws.

The pipeline order is: random resized crop, horizontal flip, color
jitter (brightness, contrast, saturation, hue, in that fixed order),
grayscale, Gaussian blur, solarize. The two standard views share every
setting except blur probability (1.0 vs 0.1) and solarize probability
(0.0 vs 0.2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import SeededRng
from .tensor import bilinear_resize_array

# Rec. 601 luma weights, the common grayscale convention.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugPolicy:
    """Knobs for one view's pipeline. Crop aspect is sampled relative to
    the image's own aspect ratio, so a (1, 1) ratio with full-area scale
    reproduces the input exactly."""

    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 1.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.0
    solarize_thresh: float = 0.5

    @staticmethod
    def primary() -> "AugPolicy":
        return AugPolicy()

    @staticmethod
    def secondary() -> "AugPolicy":
        return AugPolicy(blur_p=0.1, solarize_p=0.2)

    @staticmethod
    def identity() -> "AugPolicy":
        return AugPolicy(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_p=0.0,
                         jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, solarize_p=0.0)


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB -> (h, s, v) with all components in [0, 1]."""
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc,
                 np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA.astype(img.dtype), img, axes=([0], [0]))


def _random_resized_crop(img: np.ndarray, scale, ratio, g: np.random.Generator) -> np.ndarray:
    C, H, W = img.shape
    u = g.uniform(scale[0], scale[1])
    loga = g.uniform(math.log(ratio[0]), math.log(ratio[1]))
    fx = g.uniform()
    fy = g.uniform()
    area = u * H * W
    aspect = (W / H) * math.exp(loga)
    w = min(max(int(round(math.sqrt(area * aspect))), 1), W)
    h = min(max(int(round(math.sqrt(area / aspect))), 1), H)
    x0 = int(fx * (W - w + 1))
    y0 = int(fy * (H - h + 1))
    crop = img[:, y0:y0 + h, x0:x0 + w]
    return bilinear_resize_array(np.ascontiguousarray(crop), H, W)


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflect padding on both spatial axes."""
    C, H, W = img.shape
    if ksize is None:
        ksize = max(3, 2 * int(0.05 * min(H, W)) + 1)
    if ksize % 2 == 0:
        raise ValueError(f"blur kernel size must be odd, got {ksize}")
    r = ksize // 2
    xs = np.arange(-r, r + 1, dtype=img.dtype)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()

    def conv_last(a: np.ndarray) -> np.ndarray:
        ap = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(r, r)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(ap, ksize, axis=-1)
        return win @ k

    out = conv_last(img)
    out = conv_last(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    return np.ascontiguousarray(out)


def apply_pipeline(img: np.ndarray, policy: AugPolicy, rng: SeededRng) -> np.ndarray:
    """Run the full pipeline on one [C, H, W] image in [0, 1].

    All random decisions are drawn from rng in a fixed order regardless
    of whether each op fires.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {img.shape}")
    g = rng.generator()
    dtype = img.dtype

    out = _random_resized_crop(img, policy.crop_scale, policy.crop_ratio, g)

    if g.uniform() < policy.hflip_p:
        out = out[:, :, ::-1]

    d_jit = g.uniform()
    fb = g.uniform(max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness)
    fc = g.uniform(max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast)
    fs = g.uniform(max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation)
    dh = g.uniform(-policy.hue, policy.hue)
    if d_jit < policy.jitter_p:
        out = np.clip(out * fb, 0.0, 1.0)
        m = float(_luminance(out).mean())
        out = np.clip(m + (out - m) * fc, 0.0, 1.0)
        gray = _luminance(out)
        out = np.clip(gray + (out - gray) * fs, 0.0, 1.0)
        if policy.hue > 0.0:
            h, s, v = rgb_to_hsv(np.clip(out, 0.0, 1.0))
            out = hsv_to_rgb((h + dh) % 1.0, s, v)

    if g.uniform() < policy.grayscale_p:
        out = np.broadcast_to(_luminance(out), out.shape)

    d_blur = g.uniform()
    sigma = g.uniform(policy.blur_sigma[0], policy.blur_sigma[1])
    if d_blur < policy.blur_p:
        out = gaussian_blur(np.ascontiguousarray(out), sigma)

    if g.uniform() < policy.solarize_p:
        out = np.where(out < policy.solarize_thresh, out, 1.0 - out)

    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=dtype)


def two_views(batch: np.ndarray, rng: SeededRng,
              policy0: AugPolicy | None = None,
              policy1: AugPolicy | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Augment every image of [B, C, H, W] twice with per-view policies.

    Streams are keyed by (batch position, view index), so editing one
    image or swapping a policy never shifts another image's draws.
    """
    if policy0 is None:
        policy0 = AugPolicy.primary()
    if policy1 is None:
        policy1 = AugPolicy.secondary()
    x1 = np.empty_like(batch)
    x2 = np.empty_like(batch)
    for b in range(batch.shape[0]):
        x1[b] = apply_pipeline(batch[b], policy0, rng.derive(b, 0))
        x2[b] = apply_pipeline(batch[b], policy1, rng.derive(b, 1))
    return x1, x2


def gaussian_boundary_mask(h: int, w: int, k: float) -> np.ndarray:
    """[h, w] Gaussian window centred with half-pixel convention.

    Sigma is k*w horizontally and k*h vertically; the value approaches 1
    at the centre and decays toward tile borders. Used to de-emphasize
    content near subimage seams.
    """
    if h <= 0 or w <= 0 or k <= 0:
        raise ValueError(f"bad mask size or width: {h}x{w}, k={k}")
    sy, sx = k * h, k * w
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = ((np.arange(h) - cy) ** 2) / (2.0 * sy * sy)
    xs = ((np.arange(w) - cx) ** 2) / (2.0 * sx * sx)
    return np.exp(-(ys[:, None] + xs[None, :]))
