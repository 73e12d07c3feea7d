"""Supervised montage objective.

A single network sees the same montage batches as the contrastive path,
but instead of matching latents across views it classifies every
subimage. Labels are reordered into tile-slot order so that row b of
the per-subimage pooled logits and row b of the targets always describe
the same source image, then one cross-entropy term per montage scale is
combined with the per-level weights. No target network, projector or
predictor is involved; the classifier is a single linear layer shared
by every pyramid level, which is why the levels must agree on a feature
width (the head output, not the raw backbone stages).
"""
from __future__ import annotations

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .montage import MontageBatch
from .seeding import SeededRng


def assemble_targets(labels, mb: MontageBatch) -> np.ndarray:
    """Reorder per-image labels into montage tile-slot order.

    Tile slot b of the montage batch holds source image mb.src_ids[b],
    so the label for pooled-feature row b is labels[src_ids[b]].
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != mb.n_subimages:
        raise ValueError(
            f"got {labels.shape} labels for {mb.n_subimages} subimages")
    return labels[mb.src_ids]


def multilevel_ce(per_level_logits: list[T.Tensor], per_level_labels,
                  level_weights) -> T.Tensor:
    """Weighted sum over montage scales of mean cross-entropy."""
    if not len(per_level_logits) == len(per_level_labels) == len(level_weights):
        raise ValueError("logits, labels and weights must align level for level")
    if not per_level_logits:
        raise ValueError("need at least one level")
    total = None
    for logits, labels, w in zip(per_level_logits, per_level_labels, level_weights):
        term = T.scale(T.softmax_cross_entropy(logits, np.asarray(labels)), float(w))
        total = term if total is None else T.add(total, term)
    return total


class SupervisedNet(nn.Module):
    """Pyramid encoder plus one linear classifier shared across levels."""

    def __init__(self, cfg: M.NetConfig, n_classes: int, rng: SeededRng,
                 dtype=np.float32):
        super().__init__()
        if n_classes < 2:
            raise ValueError(f"need at least two classes, got {n_classes}")
        init = nn.InitStream(rng)
        self.encoder = M.PyramidEncoder(cfg, init=init, dtype=dtype)
        self.classifier = nn.Linear(cfg.pyramid_channels, n_classes,
                                    init=init, dtype=dtype)
        self.cfg = cfg

    def level_logits(self, mb: MontageBatch) -> T.Tensor:
        """Per-subimage logits in tile-slot order, [B, n_classes]."""
        idx = M.assign_level(mb.scale, self.cfg.pyramid_levels)
        fmap = self.encoder.level_features(T.Tensor(mb.images), idx)
        pooled = T.grid_avg_pool(fmap, mb.grid)
        return self.classifier(pooled)
