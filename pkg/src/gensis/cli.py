"""Command-line entry point: ``gensis <stage> [--config PATH] [--seed N] [--out-dir DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline
from .config import ConfigError, TrainConfig
from .geometry import AlphaPolicy


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; absent fields take their defaults")
    p.add_argument("--seed", type=int, help="run seed (also the dataset seed unless the config fixes one)")
    p.add_argument("--out-dir", help="run directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_diffusion(p: argparse.ArgumentParser) -> None:
    p.add_argument("--guidance", type=float, help="classifier-free guidance weight")
    p.add_argument("--ddim-steps", type=int, help="number of DDIM sampling steps")


def _add_gensis(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-disentangle", action="store_true", help="drop the disentanglement term")
    p.add_argument("--pixel-baseline", action="store_true",
                   help="disentangle pixel-space blends of real images instead of generated interpolations")
    p.add_argument("--alpha", type=float, nargs="+", metavar="A",
                   help="one value fixes alpha; several values are drawn uniformly per sample")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gensis", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("pretrain-vanilla", help="train DINO with hand-crafted augmentations")
    _add_shared(p)
    p.add_argument("--global-only", action="store_true", help="no local crops")

    p = sub.add_parser("train-eldm", help="train the embedding-conditioned denoiser")
    _add_shared(p)

    p = sub.add_parser("gen-augs", help="build generative and interpolated caches")
    _add_shared(p)
    _add_diffusion(p)
    p.add_argument("--alpha", type=float, nargs="+", metavar="A", help="alpha support of the interpolated cache")
    p.add_argument("--force", action="store_true", help="rebuild caches even when up to date")

    p = sub.add_parser("pretrain-gensis", help="retrain with self-augmentations")
    _add_shared(p)
    _add_diffusion(p)
    _add_gensis(p)
    p.add_argument("--global-only", action="store_true", help="no local crops")

    p = sub.add_parser("eval", help="k-NN, linear probe and diffusion diagnostics")
    _add_shared(p)
    _add_diffusion(p)
    p.add_argument("--alpha", type=float, nargs="+", metavar="A", help="alpha support of the cache to diagnose")

    p = sub.add_parser("all", help="run every stage in order")
    _add_shared(p)
    _add_diffusion(p)
    _add_gensis(p)
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    diff = cfg.diffusion
    if getattr(args, "guidance", None) is not None:
        diff = replace(diff, guidance=args.guidance)
    if getattr(args, "ddim_steps", None) is not None:
        diff = replace(diff, ddim_steps=args.ddim_steps)
    g = cfg.gensis
    if getattr(args, "no_disentangle", False):
        g = replace(g, disentangle=False)
    if getattr(args, "pixel_baseline", False):
        g = replace(g, pixel_baseline=True)
    if getattr(args, "global_only", False) and args.stage == "pretrain-gensis":
        g = replace(g, global_only=True)
    if getattr(args, "alpha", None):
        a = args.alpha
        policy = AlphaPolicy.fixed(a[0]) if len(a) == 1 else AlphaPolicy.uniform_choice(a)
        g = replace(g, alpha_policy=policy.to_dict())
    return replace(cfg, diffusion=diff, gensis=g).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.stage == "pretrain-vanilla":
            result = pipeline.stage_pretrain_vanilla(cfg, global_only=args.global_only).to_dict()
        elif args.stage == "train-eldm":
            result = pipeline.stage_train_eldm(cfg).to_dict()
        elif args.stage == "gen-augs":
            result = pipeline.stage_gen_augs(cfg, force=args.force).to_dict()
        elif args.stage == "pretrain-gensis":
            result = pipeline.stage_pretrain_gensis(cfg).to_dict()
        elif args.stage == "eval":
            result = pipeline.stage_eval(cfg)
        else:
            result = pipeline.run_all(cfg)
    except (ConfigError, pipeline.StageError, pipeline.CollapseError) as exc:
        print(f"gensis {args.stage}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
