"""Command line entry points.

Every subcommand reads an optional config file and applies flag
overrides on top, so a run is fully described by one file plus the
command line that launched it.
"""
from __future__ import annotations

import argparse
import sys

from . import ablate as AB
from . import checkpoint as cp
from . import config as C
from . import gradcheck as G
from . import preview as PV
from . import probe as P
from . import train as TR
from .loss import MATCH_MODES


def _load(args) -> C.Config:
    cfg = C.load_config(args.config) if args.config else C.Config()
    overrides = {}
    for key, value in getattr(args, "set", None) or []:
        overrides[key] = value
    if getattr(args, "mode", None):
        overrides["train.mode"] = args.mode
    if getattr(args, "levels", None):
        overrides["train.levels"] = str(args.levels)
    if getattr(args, "objective", None):
        overrides["train.objective"] = args.objective
    if getattr(args, "out", None):
        overrides["train.out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    return C.apply_overrides(cfg, overrides)


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcl",
        description="Montage-based multi-level contrastive pretraining")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", type=_kv, metavar="K=V",
                       help="override any config field, repeatable")

    p = subs.add_parser("pretrain", help="run a pretraining job")
    common(p)
    p.add_argument("--mode", choices=MATCH_MODES)
    p.add_argument("--levels", type=int, metavar="S")
    p.add_argument("--objective", choices=("ssl", "supervised"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = subs.add_parser("probe", help="linear evaluation of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rescale", type=float, metavar="ALPHA",
                   help="divide backbone weights by ALPHA before probing")
    p.add_argument("--baseline", action="store_true",
                   help="also probe a random-initialised backbone")

    p = subs.add_parser("preview", help="write per-scale montage images")
    common(p)
    p.add_argument("--out", required=True)

    p = subs.add_parser("ablate", help="run an ablation preset")
    common(p)
    p.add_argument("--preset", required=True, choices=AB.PRESETS)

    p = subs.add_parser("gradcheck", help="finite-difference operator checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "gradcheck":
        return 0 if G.run_gradcheck(echo=print) else 1

    cfg = _load(args)

    if args.command == "pretrain":
        res = TR.pretrain(cfg, resume=args.resume, echo=print)
        print(f"metrics: {res['metrics']}")
        print(f"checkpoint: {res['checkpoint']}")
        return 0

    if args.command == "probe":
        train_ds, eval_ds = TR.load_datasets(cfg.data)
        arrays, _ = cp.load_checkpoint(args.ckpt)
        res = P.linear_probe(cfg, train_ds, eval_ds, arrays,
                             rescale_alpha=args.rescale)
        print(f"probe top-1: {res['top1']:.4f} ({res['n_eval']} eval images)")
        if args.baseline:
            ref = P.linear_probe(cfg, train_ds, eval_ds, None)
            print(f"random-init baseline top-1: {ref['top1']:.4f}")
        return 0

    if args.command == "preview":
        results = PV.montage_previews(cfg, args.out)
        for s in sorted(results):
            print(f"scale {s}: {results[s]['path']}")
        return 0

    if args.command == "ablate":
        res = AB.run_preset(args.preset, cfg, echo=print)
        print(f"results: {res['csv']}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
