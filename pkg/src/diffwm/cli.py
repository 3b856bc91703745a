"""Command-line front end: train, embed, extract, evaluate, analyze, gradcheck."""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import imageio
from .attacks import AttackMixture, AttackSpec
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetError, build_dataset, load_gray
from .pipeline import (center_crop, diffusion_pattern, embed_image, evaluate_grid,
                       extract_image, frequency_energy_curve, image_ssim, psnr, ber,
                       zigzag_order)
from .tensorcore import ShapeError
from .training import PRESETS, DivergenceError, TrainConfig, preset, train

log = logging.getLogger("diffwm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

OUT_ENV = "DIFFWM_OUT_DIR"

# desk-scale dataset defaults per preset: (sources, patch count, std bins)
DATA_DEFAULTS = {
    "overfit": (["synthetic:4"], 64, 4),
}
DEFAULT_DATA = (["synthetic:32"], 5000, 10)

DEFAULT_GRID = ("gaussian_noise:5,15,25;salt_pepper:2,6,10;crop:10,20,30;grid_crop:20,30,40;"
                "pattern:3,6,9;jpeg:90,70,50;gaussian_blur:1,1.6,2;sharpen:1,5,10;median:3,5,7;"
                "resize:0.5,0.75,1.5")


class ConfigError(ValueError):
    pass


def _out_dir(args) -> Path:
    return Path(getattr(args, "out_dir", None) or os.environ.get(OUT_ENV, "."))


def _read_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.read(path)
    return cfg


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def parse_grid(text: str) -> list[tuple[str, list[float]]]:
    """``"jpeg:90,70;median:3"`` -> ``[("jpeg", [90, 70]), ("median", [3])]``."""
    grid = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        kind, _, levels = part.partition(":")
        grid.append((kind.strip(), [float(v) for v in levels.split(",")] if levels else [0.0]))
    return grid


# --------------------------------------------------------------------------
# commands

def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    cfg = _read_config(args.config)
    values = dict(cfg["train"]) if cfg.has_section("train") else {}
    data = dict(cfg["data"]) if cfg.has_section("data") else {}
    name = args.preset or values.pop("preset", None)
    values.update(_parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.iterations is not None:
        values["iterations"] = str(args.iterations)
    try:
        base = TrainConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if name:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        explicit = {k: getattr(base, k) for k in values}
        config = preset(name, **explicit)
    else:
        config = base

    sources, count, bins = DATA_DEFAULTS.get(name, DEFAULT_DATA)
    if args.data:
        sources = args.data
    elif "sources" in data:
        sources = data["sources"].split()
    dataset = {
        "sources": sources,
        "patch_count": int(args.patches or data.get("patch_count", count)),
        "bins": int(args.bins or data.get("bins", bins)),
    }
    return config, dataset


def training_data(config: TrainConfig, ds_opts: dict):
    """The patch set ``train`` uses; a pure function of the seed and options."""
    for src in ds_opts["sources"]:
        if not str(src).startswith("synthetic:") and not Path(src).exists():
            raise FileNotFoundError(f"dataset source not found: {src}")
    data_rng = np.random.default_rng([config.seed, 0])
    return build_dataset(ds_opts["sources"], ds_opts["patch_count"], ds_opts["bins"], data_rng)


def cmd_train(args) -> int:
    config, ds_opts = resolve_train_config(args)
    log.info("resolved training config:\n%s", config.to_text().rstrip())
    log.info("dataset: %s", ds_opts)
    dataset = training_data(config, ds_opts)

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.dwm"
    log_path = Path(args.log) if args.log else ckpt_path.with_suffix(".log.csv")
    # resolved settings, enough to rerun with --config
    ckpt_path.with_suffix(".config.ini").write_text(
        "[train]\n" + config.to_text() + "\n[data]\n"
        + f"sources = {' '.join(map(str, ds_opts['sources']))}\n"
        + f"patch_count = {ds_opts['patch_count']}\nbins = {ds_opts['bins']}\n")

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "ssim", "bce", "ber", "attack", "wall_time"])

        def on_log(row):
            writer.writerow([row.iteration, f"{row.loss:.6f}", f"{row.ssim:.6f}", f"{row.bce:.6f}",
                             f"{row.ber:.6f}", row.attack, f"{row.wall_time:.3f}"])
            fh.flush()
            log.info("iter %d  loss %.4f  ssim %.4f  bce %.4f  ber %.4f",
                     row.iteration, row.loss, row.ssim, row.bce, row.ber)

        state = train(config, dataset, on_log=on_log, log_every=args.log_every,
                      on_checkpoint=lambda s: save_checkpoint(s, ckpt_path))
    save_checkpoint(state, ckpt_path)
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def _load_cover(path: str) -> np.ndarray:
    img = load_gray(path)
    return np.clip(np.round(center_crop(img)), 0, 255).astype(np.uint8)


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cover = _load_cover(args.cover)
    bits = imageio.read_bits(args.watermark)
    marked = embed_image(cover, bits, ckpt.embedder, args.alpha)
    out = Path(args.out) if args.out else _out_dir(args) / "watermarked.pgm"
    imageio.write_pgm(out, marked)
    print(f"wrote {out}")
    print(f"PSNR {psnr(cover, marked):.4f} dB")
    print(f"SSIM {image_ssim(cover, marked):.6f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    image = _load_cover(args.image)
    bits, _ = extract_image(image, ckpt.extractor, hard_vote=args.hard_vote)
    out = Path(args.out) if args.out else _out_dir(args) / "extracted.bits"
    imageio.write_bits(out, bits)
    print(f"wrote {out}")
    if args.reference:
        ref = imageio.read_bits(args.reference)
        print(f"BER {ber(ref, bits):.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    alphas = [float(a) for a in args.alphas.split(",")]
    grid = parse_grid(args.attacks)
    mask = imageio.read_pgm(args.mask) if args.mask else None
    report = evaluate_grid(args.images, ckpt.embedder, ckpt.extractor, alphas, grid,
                           wm_trials=args.trials, seed=args.seed, mask=mask)
    out = Path(args.out) if args.out else _out_dir(args) / "report.csv"
    out.write_text(report.to_csv())
    out.with_suffix(".txt").write_text(report.summary())
    print(report.summary(), end="")
    print(f"wrote {out}")
    return EXIT_IO if report.failures and not report.rows else EXIT_OK


def cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    i, j = (int(v) for v in args.bit.split(","))
    pattern = diffusion_pattern(ckpt.embedder, (i, j), alpha=args.alpha)
    curve = frequency_energy_curve(pattern)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    # x10 amplification for viewing only
    imageio.write_pgm(out / "pattern.pgm", np.clip(np.round(128 + 10 * pattern), 0, 255).astype(np.uint8))
    np.save(out / "pattern.npy", pattern)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "u", "v", "energy"])
        for k, ((u, v), e) in enumerate(zip(zigzag_order(8), curve)):
            w.writerow([k, u, v, f"{e:.9g}"])
    print(f"wrote {out / 'pattern.pgm'}, {out / 'curve.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    from .networks import init_params
    from .transforms import build_transform

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        emb, ext = ckpt.embedder, ckpt.extractor
    else:
        emb, ext = init_params(args.seed, build_transform(args.transform))
    attack = AttackSpec.parse(args.attack)
    results = gradcheck.check_end_to_end(emb, ext, attack, seed=args.seed, probes=args.probes)
    ok = True
    print(f"{'array':<24}{'max_rel_err':>14}{'max_abs_err':>14}  status")
    for name, res in results.items():
        good = gradcheck.passed(res)
        ok &= good
        print(f"{name:<24}{res[0]:>14.3e}{res[1]:>14.3e}  {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffwm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or .)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an embedder/extractor pair")
    t.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    t.add_argument("--config", help="key = value config file with [train] / [data] sections")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any training option")
    t.add_argument("--data", nargs="+", help="image files, directories or synthetic:N")
    t.add_argument("--patches", type=int)
    t.add_argument("--bins", type=int)
    t.add_argument("--checkpoint", help="checkpoint output path")
    t.add_argument("--log", help="iteration log CSV path")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="watermark a grayscale image")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("cover")
    e.add_argument("--watermark", required=True, help="1024 bits: packed binary file or 32x32 PBM")
    e.add_argument("--alpha", type=float, default=1.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", help="recover watermark bits")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("image")
    x.add_argument("--out")
    x.add_argument("--reference", help="original bits; prints BER")
    x.add_argument("--hard-vote", action="store_true")
    x.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="robustness grid over images, alphas and attacks")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("images", nargs="+")
    v.add_argument("--alphas", default="1.0,0.8,0.6")
    v.add_argument("--attacks", default=DEFAULT_GRID, help="kind:l1,l2;kind:l1 ...")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mask", help="PGM mask for the pattern attack")
    v.add_argument("--out")
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="diffusion pattern and frequency energy curve")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--bit", default="0,0", help="i,j position of the single 1 bit")
    a.add_argument("--alpha", type=float, default=1.0)
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    g.add_argument("--checkpoint")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--transform", default="dct", choices=("dct", "hadamard"))
    g.add_argument("--attack", default="identity", help="e.g. jpeg_approx:70")
    g.add_argument("--probes", type=int, default=3)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, imageio.FormatError, CheckpointError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, DivergenceError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
