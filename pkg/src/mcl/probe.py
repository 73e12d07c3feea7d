"""Linear evaluation: freeze the backbone, train a classifier on
globally pooled features, report held-out top-1 accuracy.

Only the backbone transfers; neck, head and projector stay behind.
Batch-norm running statistics are always re-estimated on the probe's
own training split before features are read out, because the training
loop accumulated them on augmented montage images whose distribution
differs from the plain evaluation inputs. The same recipe applied to a
freshly initialised backbone provides the chance-level reference that a
pretrained run must beat.
"""
from __future__ import annotations

import numpy as np

from . import config as C
from . import model as M
from . import nn
from . import optim as O
from . import tensor as T
from .data import Dataset
from .seeding import PROBE, SeededRng

_BACKBONE_PREFIXES = ("model.online_encoder.backbone.", "model.encoder.backbone.")


def backbone_arrays(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Strip checkpoint arrays down to backbone-relative names."""
    for prefix in _BACKBONE_PREFIXES:
        sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if sub:
            return sub
    raise ValueError("checkpoint holds no backbone parameters")


def _reset_bn_stats(module: nn.Module) -> None:
    for name, buf in module.named_buffers():
        if name.endswith("running_mean"):
            buf.data[...] = 0.0
        elif name.endswith("running_var"):
            buf.data[...] = 1.0
        elif name.endswith("batches_seen"):
            buf.data[...] = 0


def prepare_backbone(cfg: C.Config, ckpt_arrays: dict[str, np.ndarray] | None,
                     warm_images: np.ndarray,
                     rescale_alpha: float | None = None) -> M.Backbone:
    """Build a frozen, eval-ready backbone.

    ckpt_arrays of None gives the random-initialisation reference. The
    warm pass runs in train mode so the batch-norm buffers converge on
    the probe distribution before anything is read out.
    """
    backbone = M.Backbone(cfg.model.stage_channels,
                          init=nn.InitStream(SeededRng(cfg.train.seed)),
                          dtype=np.float32)
    if ckpt_arrays is not None:
        params = dict(backbone.named_parameters())
        for name, arr in backbone_arrays(ckpt_arrays).items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ValueError(f"backbone shape mismatch for {name}")
                params[name].data[...] = arr
    if rescale_alpha is not None:
        O.weight_rescale(backbone, rescale_alpha)
    _reset_bn_stats(backbone)
    backbone.train()
    bs = max(1, min(128, warm_images.shape[0]))
    for i in range(0, warm_images.shape[0], bs):
        backbone(T.Tensor(warm_images[i:i + bs]))
    backbone.eval()
    backbone.freeze()
    return backbone


def extract_features(backbone: M.Backbone, images: np.ndarray,
                     batch_size: int = 128) -> np.ndarray:
    """Global average pooling of the final stage map, [N, C] float32."""
    chunks = []
    for i in range(0, images.shape[0], batch_size):
        fmap = backbone(T.Tensor(images[i:i + batch_size]))[-1]
        chunks.append(fmap.data.mean(axis=(2, 3)))
    return np.concatenate(chunks, axis=0)


def run_probe(backbone: M.Backbone, train_ds: Dataset, eval_ds: Dataset,
              pcfg: C.ProbeConfig, seed: int) -> float:
    """Train the linear classifier on frozen features; return top-1."""
    if train_ds.n_classes != eval_ds.n_classes:
        raise ValueError("train and eval splits disagree on classes")
    xtr = extract_features(backbone, train_ds.images, pcfg.batch_size)
    xev = extract_features(backbone, eval_ds.images, pcfg.batch_size)
    clf = nn.Linear(xtr.shape[1], train_ds.n_classes,
                    init=nn.InitStream(SeededRng(seed, PROBE)), dtype=np.float32)
    opt = O.Sgd(list(clf.named_parameters()), momentum=pcfg.momentum)
    rng = SeededRng(seed, PROBE)
    n = xtr.shape[0]
    for epoch in range(pcfg.epochs):
        order = rng.derive(epoch).generator().permutation(n)
        for i in range(0, n - pcfg.batch_size + 1, pcfg.batch_size):
            idx = order[i:i + pcfg.batch_size]
            with T.Tape() as tape:
                ce = T.softmax_cross_entropy(clf(T.Tensor(xtr[idx])),
                                             train_ds.labels[idx])
                clf.zero_grad()
                T.backward(ce, tape)
            opt.step(pcfg.lr)
    pred = np.argmax(clf(T.Tensor(xev)).data, axis=1)
    return float((pred == eval_ds.labels).mean())


def linear_probe(cfg: C.Config, train_ds: Dataset, eval_ds: Dataset,
                 ckpt_arrays: dict[str, np.ndarray] | None,
                 rescale_alpha: float | None = None) -> dict:
    backbone = prepare_backbone(cfg, ckpt_arrays, train_ds.images, rescale_alpha)
    top1 = run_probe(backbone, train_ds, eval_ds, cfg.probe, cfg.train.seed)
    return {"top1": top1, "n_eval": len(eval_ds),
            "pretrained": ckpt_arrays is not None}
