"""Deterministic random streams derived from a single run seed.

Every stochastic choice in the package draws from a SeededRng derived
from (seed, stream_id), where the stream id is folded from small integer
coordinates such as (purpose, step, image index, view index). Streams
are stateless: the same coordinates always yield the same draws, so a
resumed run replays exactly without serializing generator state, and
changing one coordinate (say the view index) perturbs only that stream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1

# Purpose tags; the first coordinate of every derived stream.
DATASET = 1
AUGMENT = 2
SHUFFLE = 3
INIT = 4
SAMPLER = 5
PROBE = 6
PREVIEW = 7


def _splitmix64(x: int) -> int:
    """Finalizer of the splitmix64 generator; a bijection on 64-bit ints."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _fold(h: int, v: int) -> int:
    # Left fold keeps derivation order significant: derive(a, b) != derive(b, a).
    return _splitmix64(h ^ _splitmix64(v & _MASK))


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream_id) pair naming one independent random stream."""

    seed: int
    stream_id: int = 0

    def derive(self, *coords: int) -> "SeededRng":
        h = self.stream_id
        for c in coords:
            h = _fold(h, int(c))
        return SeededRng(self.seed, h)

    def generator(self) -> np.random.Generator:
        return np.random.default_rng((self.seed & _MASK, self.stream_id))
