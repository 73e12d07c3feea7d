"""Training loops for the contrastive and supervised objectives.

One optimizer step consumes one batch: augment, assemble one montage
batch per scale (two independently shuffled sets of views for the
contrastive path, a single view for the supervised path), run the
networks over the assigned pyramid levels, combine the per-scale terms,
backpropagate, and step. Every random draw is keyed by the global step
through stateless seed streams, so resuming from a checkpoint replays
the exact run an uninterrupted process would have produced; checkpoints
only need parameters, buffers, optimizer slots and the step counter.
"""
from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np

from . import augment as aug
from . import checkpoint as cp
from . import config as C
from . import data as D
from . import loss as L
from . import model as M
from . import montage as mon
from . import optim as O
from . import supervised as sup
from . import tensor as T
from .seeding import AUGMENT, SAMPLER, SHUFFLE, SeededRng


def level_weight_values(kind: str, n: int) -> list[float]:
    if kind == "pyramid":
        return list(L.default_level_weights(n))
    if kind == "uniform":
        return [1.0 / n] * n
    raise ValueError(f"unknown level weighting {kind!r}")


def metrics_columns(n_levels: int) -> list[str]:
    return (["step", "epoch", "lr", "ema_m", "total_loss"]
            + [f"loss_level_{q}" for q in range(n_levels)]
            + ["pos_cos", "neg_cos", "wall_time"])


def load_datasets(dcfg: C.DataConfig) -> tuple[D.Dataset, D.Dataset]:
    if dcfg.kind == "procedural-shapes":
        return D.generate_toy_dataset(dcfg.n_train, dcfg.n_eval, dcfg.classes,
                                      dcfg.image_h, dcfg.image_w, dcfg.seed)
    root = Path(dcfg.root)
    train = D.load_image_directory(str(root / "train"), dcfg.image_h, dcfg.image_w)
    evals = D.load_image_directory(str(root / "eval"), dcfg.image_h, dcfg.image_w)
    if train.n_classes != evals.n_classes:
        raise ValueError("train and eval directories disagree on classes")
    return train, evals


def _ce_value(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy straight from logit values, for metrics only."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(len(labels)), labels]).mean())


def single_view(batch: np.ndarray, rng: SeededRng,
                policy: aug.AugPolicy | None = None) -> np.ndarray:
    """Augment every image once, on the same per-image streams the
    two-view helper would use for view 0."""
    policy = policy if policy is not None else aug.AugPolicy.primary()
    out = np.empty_like(batch)
    for b in range(batch.shape[0]):
        out[b] = aug.apply_pipeline(batch[b], policy, rng.derive(b, 0))
    return out


def ssl_step(nets: M.MclNetworks, opt, batch: np.ndarray, *, n_scales: int,
             mode: str, tau: float, weights: list[float],
             boundary_k: float | None, lr: float, ema_m: float,
             rng_aug: SeededRng, rng_shuffle: SeededRng) -> dict:
    """One contrastive update; rngs are already scoped to this step."""
    v1, v2 = aug.two_views(batch, rng_aug)
    q_scales = sorted({q for q, _ in L.pair_levels(mode, n_scales)})
    t_scales = L.target_scales(mode, n_scales)
    montages = {
        (vi, s): mon.assemble(view, s, rng_shuffle.derive(vi, s), boundary_k)
        for vi, view in ((0, v1), (1, v2))
        for s in sorted(set(q_scales) | set(t_scales))
    }
    with T.Tape() as tape:
        lat = []
        for vi in (0, 1):
            online = {}
            for s in q_scales:
                mb = montages[vi, s]
                online[s] = nets.encode_online(T.Tensor(mb.images), mb)
            target = {}
            for s in t_scales:
                mb = montages[vi, s]
                target[s] = nets.encode_target(T.Tensor(mb.images), mb)
            lat.append(L.ViewLatents(online=online, target=target))
        lcfg = L.LossConfig(tau=tau, mode=mode, level_weights=tuple(weights))
        total, per_level, diag = L.total_loss(lat[0], lat[1], n_scales, lcfg)
        nets.zero_grad()
        T.backward(total, tape)
    opt.step(lr)
    M.ema_update(nets, ema_m)
    return {
        "loss": total.item(),
        "levels": [per_level[q] / weights[q] for q in range(n_scales)],
        "pos_cos": diag["pos_cos"],
        "neg_cos": diag["neg_cos"],
    }


def supervised_step(net: sup.SupervisedNet, opt, batch: np.ndarray,
                    labels: np.ndarray, *, n_scales: int,
                    weights: list[float], boundary_k: float | None,
                    lr: float, rng_aug: SeededRng, rng_shuffle: SeededRng,
                    policy: aug.AugPolicy | None = None) -> dict:
    """One supervised update on montages of a single augmented view."""
    view = single_view(batch, rng_aug, policy)
    montages = [mon.assemble(view, s, rng_shuffle.derive(0, s), boundary_k)
                for s in range(n_scales)]
    targets = [sup.assemble_targets(labels, mb) for mb in montages]
    with T.Tape() as tape:
        logits = [net.level_logits(mb) for mb in montages]
        total = sup.multilevel_ce(logits, targets, weights)
        net.zero_grad()
        T.backward(total, tape)
    opt.step(lr)
    return {
        "loss": total.item(),
        "levels": [_ce_value(lg.data, tg) for lg, tg in zip(logits, targets)],
        "pos_cos": "",
        "neg_cos": "",
    }


def _ssl_state(cfg: C.Config):
    nets = M.MclNetworks(cfg.model.net_config(), SeededRng(cfg.train.seed))
    ocfg = O.OptimConfig(
        lr_scale=cfg.train.lr_scale, weight_decay=cfg.train.weight_decay,
        momentum=cfg.train.momentum,
        trust_coefficient=cfg.train.trust_coefficient,
        warmup_epochs=cfg.train.warmup_epochs)
    trainable = [(n, p) for n, p in nets.named_parameters() if p.requires_grad]
    return nets, O.Lars(trainable, ocfg)


def _supervised_state(cfg: C.Config, n_classes: int):
    net = sup.SupervisedNet(cfg.model.net_config(), n_classes,
                            SeededRng(cfg.train.seed))
    opt = O.Sgd(list(net.named_parameters()), momentum=cfg.train.momentum,
                weight_decay=cfg.train.weight_decay)
    return net, opt


def pretrain(cfg: C.Config, resume: str | None = None,
             stop_after_steps: int | None = None, echo=None) -> dict:
    """Run (or continue) a pretraining job; returns paths and last stats.

    stop_after_steps ends the loop early without touching the schedule
    horizon, mimicking an interrupted run that a later resume finishes.
    """
    C.validate_config(cfg)
    t = cfg.train
    out = Path(t.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _ = load_datasets(cfg.data)

    steps_per_epoch = len(train_ds) // t.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"batch {t.batch_size} exceeds {len(train_ds)} images")
    total_steps = t.epochs * steps_per_epoch
    warmup_steps = t.warmup_epochs * steps_per_epoch
    weights = level_weight_values(t.level_weights, t.levels)
    boundary = t.boundary_k if t.boundary_k > 0 else None
    cfg_hash = C.config_hash(cfg)

    if t.objective == "ssl":
        model, opt = _ssl_state(cfg)
        base = O.base_lr(t.lr_scale, t.batch_size)
    else:
        model, opt = _supervised_state(cfg, train_ds.n_classes)
        base = t.sgd_lr

    start_step = 0
    if resume is not None:
        arrays, meta = cp.load_checkpoint(resume)
        if meta.get("config_hash") != cfg_hash:
            raise ValueError(f"checkpoint {resume} was written by a different config")
        model.load_state_arrays(arrays, prefix="model.")
        opt.load_state_arrays(arrays, prefix="optim.")
        start_step = int(meta["global_step"])

    def save(path: Path, gstep: int) -> Path:
        arrays = model.state_arrays(prefix="model.")
        arrays.update(opt.state_arrays(prefix="optim."))
        meta = {"config_hash": cfg_hash, "global_step": gstep,
                "epoch": gstep // steps_per_epoch, "objective": t.objective}
        cp.save_checkpoint(str(path), arrays, meta)
        return path

    metrics_path = out / "metrics.csv"
    cols = metrics_columns(t.levels)
    fresh = start_step == 0 or not metrics_path.exists()
    mf = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
    if fresh:
        mf.write(",".join(cols) + "\n")

    C.save_config(cfg, str(out / "config.txt"))
    rng_sampler = SeededRng(t.seed, SAMPLER)
    rng_aug = SeededRng(t.seed, AUGMENT)
    rng_shuffle = SeededRng(t.seed, SHUFFLE)
    last_ckpt: Path | None = Path(resume) if resume else None
    last_stats: dict = {}
    order = None
    t0 = time.time()
    stop = total_steps if stop_after_steps is None else min(
        total_steps, start_step + stop_after_steps)

    for gstep in range(start_step, stop):
        epoch, it = divmod(gstep, steps_per_epoch)
        if it == 0 or order is None:
            order = rng_sampler.derive(epoch).generator().permutation(len(train_ds))
        idx = order[it * t.batch_size:(it + 1) * t.batch_size]
        batch = train_ds.images[idx]
        lr = O.lr_schedule(gstep, total_steps, warmup_steps, base)

        if t.objective == "ssl":
            ema_m = M.momentum_schedule(gstep, total_steps, t.ema_momentum)
            stats = ssl_step(
                model, opt, batch, n_scales=t.levels, mode=t.mode, tau=t.tau,
                weights=weights, boundary_k=boundary, lr=lr, ema_m=ema_m,
                rng_aug=rng_aug.derive(gstep), rng_shuffle=rng_shuffle.derive(gstep))
        else:
            ema_m = ""
            stats = supervised_step(
                model, opt, batch, train_ds.labels[idx], n_scales=t.levels,
                weights=weights, boundary_k=boundary, lr=lr,
                rng_aug=rng_aug.derive(gstep), rng_shuffle=rng_shuffle.derive(gstep))

        if not math.isfinite(stats["loss"]):
            mf.close()
            raise RuntimeError(
                f"non-finite loss at step {gstep + 1}; last good checkpoint: "
                f"{last_ckpt if last_ckpt is not None else 'none'}")
        last_stats = stats

        done = gstep + 1
        if done % t.log_every == 0 or done == stop:
            row = [done, epoch + 1, lr, ema_m, stats["loss"],
                   *stats["levels"], stats["pos_cos"], stats["neg_cos"],
                   round(time.time() - t0, 3)]
            mf.write(",".join(str(v) for v in row) + "\n")
            mf.flush()

        end_of_epoch = it == steps_per_epoch - 1
        if end_of_epoch and (epoch + 1) % t.ckpt_every_epochs == 0 and done < total_steps:
            last_ckpt = save(out / f"ckpt_ep{epoch + 1:03d}.ckpt", done)
        if end_of_epoch and echo is not None:
            echo(f"epoch {epoch + 1}/{t.epochs} step {done} "
                 f"loss {stats['loss']:.4f} lr {lr:.4g}")

    mf.close()
    final = save(out / ("final.ckpt" if stop == total_steps else "interrupted.ckpt"),
                 stop)
    return {
        "out_dir": str(out),
        "metrics": str(metrics_path),
        "checkpoint": str(final),
        "steps_per_epoch": steps_per_epoch,
        "total_steps": total_steps,
        "completed_steps": stop,
        "last": last_stats,
    }
