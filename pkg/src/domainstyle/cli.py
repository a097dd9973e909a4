"""Command line: ``dataset-check``, ``train``, ``generate``, ``evaluate``.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical abort.
Precedence everywhere: flags over config-file keys over preset defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from .config import ConfigError, check_config, default_config, load_config, apply_overrides, save_config
from .data import IMAGE_SUFFIXES, DatasetError, load_image, sample_latents, save_png, denormalize, scan_dataset
from .evaluation import RandomCNNExtractor, fid_protocol, lpips_protocol, write_metrics
from .synthesis import interpolate_styles, latent_style, render_grid, save_grid
from .training import Trainer

DATA_ENV = "DOMAINSTYLE_DATA"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("domainstyle")


class UsageError(Exception):
    pass


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"--data not given and {DATA_ENV} is not set")
    return Path(root)


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _rel(path: Path, out: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(out).resolve())


# -- dataset-check -------------------------------------------------------------

def cmd_dataset_check(args) -> int:
    ds = scan_dataset(_data_root(args), args.test_fraction)
    first = ds.train_index[0][0]
    from PIL import Image

    with Image.open(first) as im:
        width, height = im.size
    print(f"root: {ds.root}")
    print(f"domains: {len(ds.domains)}")
    for name, train, test in zip(ds.domains, ds.train_index, ds.test_index):
        print(f"  {name}: train={len(train)} test={len(test)}")
    print(f"sample resolution: {width}x{height}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _train_config(args, num_domains: int):
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iters is not None:
        overrides["total_iters"] = args.iters
        overrides.setdefault("ds_decay_iters", args.iters)
    if args.config:
        cfg = load_config(args.config, overrides, preset=args.preset)
    else:
        cfg = check_config(apply_overrides(default_config(args.preset or "toy"), overrides))
    if cfg.num_domains != num_domains:
        log.info("num_domains set to %d from the dataset", num_domains)
        cfg = check_config(replace(cfg, num_domains=num_domains))
    return cfg


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = scan_dataset(_data_root(args), args.test_fraction)
    cfg = _train_config(args, probe.num_domains)
    ds = scan_dataset(probe.root, args.test_fraction, cfg.image_size)
    if args.resume:
        trainer = load_checkpoint(args.resume, cfg)
    else:
        trainer = Trainer.create(cfg)
    save_config(cfg, out / "config.txt")
    trainer.fit(ds, out, until=args.until, domains=ds.domains)
    print(f"trained to iteration {trainer.bundle.iteration}; checkpoint {out / 'latest.npz'}")
    return EXIT_OK


# -- generate ------------------------------------------------------------------

def _collect_images(items: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items or []:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"input not found: {p}")
    return paths


def _domain_index(domains: list[str], name: str) -> int:
    if name not in domains:
        raise UsageError(f"unknown domain {name!r}; valid names: {', '.join(domains)}")
    return domains.index(name)


def cmd_generate(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    bundle, cfg = trainer.bundle, trainer.cfg
    domains = read_meta(args.checkpoint).get("domains") or [str(i) for i in range(cfg.num_domains)]
    target = _domain_index(domains, args.domain)
    sources = _collect_images(args.src)
    if not sources:
        raise UsageError("no source images given (--src)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    xs = [load_image(p, cfg.image_size) for p in sources]
    rng = np.random.default_rng(args.seed)

    if args.mode == "latent":
        z = sample_latents(args.num_styles, cfg.latent_dim, rng)
        styles = [(z[j : j + 1], target) for j in range(args.num_styles)]
        grid = render_grid(bundle, cfg, xs, styles, layout="latent")
        cells = [{"source": _rel(src, out), "latent_seed": args.seed, "latent_index": j, "domain": args.domain}
                 for src in sources for j in range(args.num_styles)]
        path = save_grid(grid, out / "latent_grid.png", cells)
    elif args.mode == "reference":
        refs = _collect_images(args.ref)
        if not refs:
            raise UsageError("reference mode needs --ref images")
        styles = [(load_image(r, cfg.image_size), target) for r in refs]
        grid = render_grid(bundle, cfg, xs, styles, layout="reference")
        cells = [{"source": _rel(src, out), "reference": _rel(ref, out), "domain": args.domain}
                 for src in sources for ref in refs]
        path = save_grid(grid, out / "reference_grid.png", cells)
    else:
        z = sample_latents(2, cfg.latent_dim, rng)
        s = latent_style(bundle, cfg, z, target)
        x = torch.stack(xs)
        frames = interpolate_styles(bundle, x, s[:1].expand(len(x), -1), s[1:].expand(len(x), -1), args.steps)
        strip = np.concatenate([np.concatenate(list(denormalize(f)), axis=0) for f in frames], axis=1)
        path = out / "interpolation.png"
        save_png(strip, path)
        path.with_suffix(".json").write_text(json.dumps({
            "sources": [_rel(s, out) for s in sources], "latent_seed": args.seed,
            "domain": args.domain, "steps": args.steps,
        }, indent=2, sort_keys=True))
    print(f"wrote {path}")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    bundle, cfg = trainer.bundle, trainer.cfg
    ds = scan_dataset(_data_root(args), args.test_fraction, cfg.image_size)
    if ds.num_domains != cfg.num_domains:
        raise UsageError(f"dataset has {ds.num_domains} domains, checkpoint expects {cfg.num_domains}")
    extractor = RandomCNNExtractor(seed=args.extractor_seed)
    protocol = fid_protocol if args.metric == "fid" else lpips_protocol
    result = protocol(bundle, cfg, ds, args.mode, extractor, seed=args.seed, num_styles=args.num_styles)
    path = write_metrics(result, Path(args.out) / f"{args.metric}_{args.mode}.json")
    print(f"{args.metric} ({args.mode}) mean: {result['mean']:.6f}  -> {path}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainstyle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
        p.add_argument("--test-fraction", type=float, default=0.1)

    p = sub.add_parser("dataset-check", help="scan a folder-per-domain dataset")
    data_flags(p)
    p.set_defaults(func=cmd_dataset_check)

    p = sub.add_parser("train", help="train a model")
    data_flags(p)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=["face", "animal", "toy"])
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="total_iters (and ds_decay_iters unless set)")
    p.add_argument("--until", type=int, help="stop at this iteration without changing the schedule")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="translate images with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["latent", "reference", "interpolate"], default="latent")
    p.add_argument("--src", nargs="+", required=True)
    p.add_argument("--ref", nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-styles", type=int, default=4)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FID / perceptual diversity over all domain pairs")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=["fid", "lpips"], default="fid")
    p.add_argument("--mode", choices=["latent", "reference"], default="latent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-styles", type=int, default=10)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:  # non-finite losses or activations
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetError, CheckpointError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
