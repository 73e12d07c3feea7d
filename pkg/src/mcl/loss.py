"""Multi-level contrastive objective over montage latents.

Latents are grouped by montage scale. A matching mode decides which
(query scale, target scale) pairs contribute; each pair is an InfoNCE
term where row b of the query view must pick row b of the target view
out of the whole batch. The loss is symmetric in the two augmented
views, and each term is weighted by the query scale (halving per scale
by default, so full-size subimages dominate).

Matching modes:
    a  every query scale against the full-size target scale
    b  each scale against itself
    c  each scale against itself and its immediate neighbours
    d  every scale against every scale
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T

MATCH_MODES = ("a", "b", "c", "d")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    mode: str = "a"
    level_weights: tuple[float, ...] | None = None
    adjacent_include_self: bool = True


@dataclass
class ViewLatents:
    """Embeddings of one augmented view: online per query scale, target
    per target scale. Rows are ordered by source image index."""

    online: dict[int, T.Tensor]
    target: dict[int, T.Tensor]


def default_level_weights(n_scales: int) -> tuple[float, ...]:
    return tuple(2.0 ** -(q + 1) for q in range(n_scales))


def pair_levels(mode: str, n_scales: int, adjacent_include_self: bool = True
                ) -> list[tuple[int, int]]:
    """(query scale, target scale) pairs for a matching mode, sorted."""
    if mode not in MATCH_MODES:
        raise ValueError(f"unknown matching mode {mode!r}, expected one of {MATCH_MODES}")
    if n_scales < 1:
        raise ValueError(f"need at least one scale, got {n_scales}")
    rng = range(n_scales)
    if mode == "a":
        pairs = [(q, 0) for q in rng]
    elif mode == "b":
        pairs = [(q, q) for q in rng]
    elif mode == "c":
        pairs = [(q, t) for q in rng for t in rng
                 if abs(q - t) <= 1 and (adjacent_include_self or q != t)]
    else:
        pairs = [(q, t) for q in rng for t in rng]
    return sorted(pairs)


def target_scales(mode: str, n_scales: int, adjacent_include_self: bool = True) -> list[int]:
    """Distinct target scales a mode needs, so trainers can skip the rest."""
    return sorted({t for _, t in pair_levels(mode, n_scales, adjacent_include_self)})


def info_nce(u: T.Tensor, v_pos: T.Tensor, negatives: T.Tensor, tau: float) -> T.Tensor:
    """Single-anchor InfoNCE: -log exp(u.v+/tau) / sum over {v+} u {negs}.

    u and v_pos are [D]; negatives is [K, D]. With no negatives the term
    is exactly zero (a lone positive is always picked) and flagged.
    Evaluated through the shifted log-sum-exp identity, so it is finite
    for any finite inputs.
    """
    if u.ndim != 1 or v_pos.shape != u.shape:
        raise ValueError(f"anchor/positive shapes {u.shape}, {v_pos.shape} must match 1-d")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    d = u.shape[0]
    l_pos = T.scale(T.tsum(T.mul(u, v_pos)), 1.0 / tau)
    if negatives.size == 0:
        warnings.warn("info_nce with no negatives is identically zero", RuntimeWarning,
                      stacklevel=2)
        return T.scale(l_pos, 0.0)
    if negatives.ndim != 2 or negatives.shape[1] != d:
        raise ValueError(f"negatives shape {negatives.shape} incompatible with dim {d}")
    k = negatives.shape[0]
    l_neg = T.reshape(T.matmul(negatives, T.reshape(u, (d, 1))), (k,))
    l_neg = T.scale(l_neg, 1.0 / tau)
    # log-sum-exp with the max shifted out; exact for any fixed shift
    m = float(max(l_pos.item(), l_neg.data.max()))
    s = T.add(T.tsum(T.exp(T.add_scalar(l_neg, -m))), T.exp(T.add_scalar(l_pos, -m)))
    return T.add_scalar(T.sub(T.log(s), l_pos), m)


def level_pair_loss(u: T.Tensor, v: T.Tensor, tau: float) -> T.Tensor:
    """Batched InfoNCE for one (query, target) scale pair.

    Row b of u is the anchor whose positive is row b of v; the other
    B - 1 rows of v are its negatives. Equals the mean of per-row
    info_nce terms, fused into one cross entropy over u @ v.T / tau.
    """
    if u.ndim != 2 or u.shape != v.shape:
        raise ValueError(f"latent shapes {u.shape} and {v.shape} must be equal 2-d")
    if u.shape[0] < 2:
        raise ValueError("contrastive batch needs at least 2 rows; nothing to contrast")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = T.scale(T.matmul(u, T.transpose(v)), 1.0 / tau)
    return T.softmax_cross_entropy(logits, np.arange(u.shape[0]), reduction="mean")


def total_loss(view1: ViewLatents, view2: ViewLatents, n_scales: int,
               cfg: LossConfig) -> tuple[T.Tensor, dict[int, float], dict[str, float]]:
    """Symmetric weighted sum of level-pair terms across both views.

    Returns (loss, per-query-scale weighted contributions, diagnostics
    with mean positive/negative cosine similarity over all terms).
    """
    pairs = pair_levels(cfg.mode, n_scales, cfg.adjacent_include_self)
    weights = cfg.level_weights if cfg.level_weights is not None \
        else default_level_weights(n_scales)
    if len(weights) != n_scales:
        raise ValueError(f"{len(weights)} weights for {n_scales} scales")

    total: T.Tensor | None = None
    per_level: dict[int, float] = {q: 0.0 for q in range(n_scales)}
    pos_sum = neg_sum = 0.0
    pos_n = neg_n = 0
    for q, t in pairs:
        for u_side, v_side in ((view1.online, view2.target), (view2.online, view1.target)):
            if q not in u_side:
                raise KeyError(f"missing online latents for query scale {q}")
            if t not in v_side:
                raise KeyError(f"missing target latents for target scale {t}")
            u, v = u_side[q], v_side[t]
            term = T.scale(level_pair_loss(u, v, cfg.tau), weights[q])
            total = term if total is None else T.add(total, term)
            per_level[q] += term.item()
            cos = u.data @ v.data.T
            b = cos.shape[0]
            pos_sum += float(np.trace(cos))
            pos_n += b
            neg_sum += float(cos.sum() - np.trace(cos))
            neg_n += b * (b - 1)
    diagnostics = {
        "pos_cos": pos_sum / max(pos_n, 1),
        "neg_cos": neg_sum / max(neg_n, 1),
    }
    assert total is not None
    return total, per_level, diagnostics
