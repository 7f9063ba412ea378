"""``memaudit`` command line.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .numerics import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _dims(text: str) -> list[int]:
    try:
        d = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 16,16,16, got {text!r}") from None
    if len(d) != 3:
        raise argparse.ArgumentTypeError(f"dims needs three values, got {text!r}")
    return d


def _assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its fields")
    common.add_argument("--root", help=f"run directory (default ${pl.ROOT_ENV} or the cwd)")
    common.add_argument("--set", action="append", type=_assignment, default=[], metavar="KEY=VALUE",
                        help="override a dotted config field, e.g. diffusion.epochs=200")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--force", action="store_true", help="rerun stages that are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="memaudit", description="Memorization audit for 3D latent diffusion models.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write the phantom corpus")
    s.add_argument("--count", type=int, help="number of training phantoms")
    s.add_argument("--val-count", type=int, help="number of validation phantoms")
    s.add_argument("--dims", type=_dims, help="volume extents, e.g. 16,16,16")
    s.add_argument("--out", help="data directory (relative to the root)")

    s = sub.add_parser("train-ae", parents=[common], help="train the autoencoder")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("train-diff", parents=[common], help="train the latent denoiser")
    s.add_argument("--epochs", type=int)
    s.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None,
                   help="train on all orientations of every training volume")

    s = sub.add_parser("train-con", parents=[common], help="train the contrastive detector")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("generate", parents=[common], help="sample synthetic volumes")
    s.add_argument("--multiplier", type=int, help="synthetic samples per training volume")
    s.add_argument("--planted", action="store_true",
                   help="build a pool of fresh phantoms plus planted training copies instead")

    s = sub.add_parser("audit", parents=[common], help="write the audit report")
    s.add_argument("--quantile", type=float)
    s.add_argument("--bins", type=int)

    s = sub.add_parser("experiment", parents=[common],
                       help="augmented vs non-augmented LDM copy rates over paired seeds")
    s.add_argument("--seeds", type=int, default=3)
    return p


def _overrides(args) -> dict:
    o = dict(args.set)
    if args.seed is not None:
        o["seed"] = args.seed
    cmd = args.cmd
    flag_map = {
        "phantom": {"count": "n_train", "val_count": "n_val", "dims": "dims", "out": "paths.data"},
        "train-ae": {"epochs": "autoencoder.epochs"},
        "train-diff": {"epochs": "diffusion.epochs", "augment": "diffusion.augment"},
        "train-con": {"epochs": "embedder.epochs"},
        "generate": {"multiplier": "synth_multiplier"},
        "audit": {"quantile": "audit.quantile", "bins": "audit.bins"},
    }
    for attr, key in flag_map.get(cmd, {}).items():
        v = getattr(args, attr)
        if v is not None:
            o[key] = v
    return o


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pl.load_config(args.config, _overrides(args))
        root = Path(args.root) if args.root else pl.default_root()
        r = pl.Run(root, cfg, force=args.force)
        if args.cmd == "phantom":
            r.phantom()
            print(r.data_manifest())
        elif args.cmd == "train-ae":
            r.train_ae()
            print(r.ae_ckpt())
        elif args.cmd == "train-diff":
            r.train_diff()
            print(r.denoiser_ckpt())
        elif args.cmd == "train-con":
            r.train_con()
            print(r.embedder_ckpt())
        elif args.cmd == "generate":
            r.plant() if args.planted else r.generate()
            print(r.synth_manifest())
        elif args.cmd == "audit":
            rep = r.audit()
            print(f"copy_rate {rep.copy_rate:.4f} tau {rep.tau:.6g} -> {r.report_path()}")
        elif args.cmd == "experiment":
            res = r.experiment(args.seeds)
            for row in res["per_seed"]:
                print(f"seed {row['seed_index']}: aug {row['copy_rate_aug']:.4f} "
                      f"noaug {row['copy_rate_noaug']:.4f}")
            print(f"mean: aug {res['copy_rate_aug']:.4f} noaug {res['copy_rate_noaug']:.4f}")
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
