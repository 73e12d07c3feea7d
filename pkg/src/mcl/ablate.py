"""Ablation presets: run pretrain + probe per cell, one CSV row each.

Every preset varies a single knob while sharing the seed, the dataset
and the epoch budget, so rows are comparable within a table. The
rescale sweep is the exception in shape: it pretrains once and probes
the same checkpoint under several weight divisors, since dividing the
weights is a post-training transformation.
"""
from __future__ import annotations

import csv
from pathlib import Path

from . import checkpoint as cp
from . import config as C
from . import probe as P
from . import train as TR

PRESETS = ("levels", "modes", "boundary", "wd-sweep", "rescale-sweep")

_CELLS = {
    "levels": [(f"S{s}", {"train.levels": str(s), "model.pyramid_levels": "4"})
               for s in (1, 2, 3, 4)],
    "modes": [(f"mode_{m}", {"train.mode": m}) for m in ("a", "b", "c", "d")],
    "boundary": [("none", {"train.boundary_k": "0"}),
                 ("k0.75", {"train.boundary_k": "0.75"}),
                 ("k0.5", {"train.boundary_k": "0.5"})],
    "wd-sweep": [(f"wd_{wd:g}", {"train.weight_decay": repr(wd)})
                 for wd in (1.5e-6, 5e-6, 1e-5)],
}
_RESCALE_DIVISORS = (1.0, 1.5, 2.0)


def run_preset(preset: str, cfg: C.Config, echo=None) -> dict:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    C.validate_config(cfg)
    root = Path(cfg.train.out_dir) / f"ablate_{preset.replace('-', '_')}"
    root.mkdir(parents=True, exist_ok=True)
    train_ds, eval_ds = TR.load_datasets(cfg.data)
    rows = []

    if preset == "rescale-sweep":
        base_cfg = C.apply_overrides(cfg, {"train.out_dir": str(root / "pretrain")})
        res = TR.pretrain(base_cfg, echo=echo)
        arrays, _ = cp.load_checkpoint(res["checkpoint"])
        for alpha in _RESCALE_DIVISORS:
            pr = P.linear_probe(cfg, train_ds, eval_ds, arrays,
                                rescale_alpha=alpha)
            rows.append({"preset": preset, "cell": f"alpha_{alpha:g}",
                         "steps": res["completed_steps"],
                         "final_loss": res["last"]["loss"],
                         "probe_top1": pr["top1"]})
            if echo is not None:
                echo(f"[{preset}] alpha {alpha:g}: top1 {pr['top1']:.3f}")
    else:
        for label, over in _CELLS[preset]:
            ccfg = C.apply_overrides(
                cfg, {**over, "train.out_dir": str(root / label)})
            res = TR.pretrain(ccfg, echo=echo)
            arrays, _ = cp.load_checkpoint(res["checkpoint"])
            pr = P.linear_probe(ccfg, train_ds, eval_ds, arrays)
            rows.append({"preset": preset, "cell": label,
                         "steps": res["completed_steps"],
                         "final_loss": res["last"]["loss"],
                         "probe_top1": pr["top1"]})
            if echo is not None:
                echo(f"[{preset}] {label}: loss {res['last']['loss']:.4f} "
                     f"top1 {pr['top1']:.3f}")

    csv_path = root / "results.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["preset", "cell", "steps", "final_loss", "probe_top1"])
        writer.writeheader()
        writer.writerows(rows)
    return {"csv": str(csv_path), "rows": rows}
