"""Command-line entry point.

Subcommands: ``synth`` (generate phantom pairs), ``train``, ``denoise``,
``eval``, and ``cluster``.  Every subcommand is reproducible under a fixed
seed.  Errors exit nonzero with a single-line ``error: <code>: <message>``
on stderr; the code table is:

    0  success
    1  unexpected internal error
    2  usage error (unknown flag, missing argument)
    3  missing file or directory
    4  malformed config
    5  malformed data (slice files, checkpoints, bad values)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .container import ContainerError
from .esau import denoise_image
from .imaging import (
    HU_WINDOW,
    SliceIOError,
    default_phantom_spec,
    generate_phantom,
    hu_window_normalize,
    load_pairs,
    load_slice,
    normalized_to_hu,
    save_pair,
    save_png16,
    save_slice,
)
from .interpret import cluster_features, render_label_map
from .metrics import evaluate
from .trainer import ConfigError, TrainConfig, load_denoiser, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_BAD_DATA = 5

_DEFAULTS = TrainConfig()

# train flags that override the config file; (flag, config field, type)
_TRAIN_OVERRIDES = [
    ("--epochs", "epochs", int),
    ("--max-steps", "max_steps", int),
    ("--batch-size", "batch_size", int),
    ("--base-width", "base_width", int),
    ("--seed", "seed", int),
    ("--lambda-pixel", "lambda_pixel", float),
    ("--weight-global", "weight_global", float),
    ("--weight-local", "weight_local", float),
    ("--checkpoint-every", "checkpoint_every", int),
]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctdenoise", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate synthetic phantom pairs")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--count", type=int, default=4, help="number of pairs (default: 4)")
    synth.add_argument("--size", type=int, default=64, help="slice size in pixels (default: 64)")
    synth.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    synth.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train the denoiser on a paired dataset")
    tr.add_argument("--config", help="JSON config file mirroring TrainConfig")
    tr.add_argument("--data", required=True, help="dataset directory of pair_*.asc files")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    for flag, field_name, typ in _TRAIN_OVERRIDES:
        tr.add_argument(
            flag, type=typ, default=None, dest=f"override_{field_name}",
            help=f"override {field_name} (default: {getattr(_DEFAULTS, field_name)})",
        )
    tr.set_defaults(func=cmd_train)

    dn = sub.add_parser("denoise", help="denoise one slice with a trained checkpoint")
    dn.add_argument("--ckpt", required=True, help="checkpoint file")
    dn.add_argument("--in", dest="input", required=True, help="input slice (.asc, HU)")
    dn.add_argument("--out", required=True, help="output slice (.asc, HU)")
    dn.add_argument("--png", help="also export the windowed result as 16-bit PNG")
    dn.add_argument("--hu-lo", type=float, default=HU_WINDOW[0],
                    help=f"window lower bound (default: {HU_WINDOW[0]})")
    dn.add_argument("--hu-hi", type=float, default=HU_WINDOW[1],
                    help=f"window upper bound (default: {HU_WINDOW[1]})")
    dn.set_defaults(func=cmd_denoise)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a paired dataset")
    ev.add_argument("--ckpt", required=True, help="checkpoint file")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--report", required=True, help="output JSON report path")
    ev.add_argument("--csv", help="also write a mean±std CSV table")
    ev.set_defaults(func=cmd_eval)

    cl = sub.add_parser("cluster", help="k-means label map of the denoiser's features")
    cl.add_argument("--ckpt", required=True, help="checkpoint file")
    cl.add_argument("--in", dest="input", required=True, help="input slice (.asc)")
    cl.add_argument("--k", type=int, default=5, help="cluster count (default: 5)")
    cl.add_argument("--seed", type=int, default=0, help="k-means seed (default: 0)")
    cl.add_argument("--out", required=True, help="output label-map PNG")
    cl.set_defaults(func=cmd_cluster)
    return p


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        pair_seed = int(np.random.SeedSequence(entropy=args.seed, spawn_key=(i,)).generate_state(1)[0])
        clean, noisy = generate_phantom(default_phantom_spec(pair_seed, args.size))
        save_pair(out, i, clean, noisy)
    print(f"wrote {args.count} pairs of {args.size}x{args.size} slices to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        config = TrainConfig.from_json(path.read_text(encoding="utf-8"))
    else:
        config = TrainConfig()
    overrides = {}
    for _, field_name, _ in _TRAIN_OVERRIDES:
        value = getattr(args, f"override_{field_name}")
        if value is not None:
            overrides[field_name] = value
            print(f"override: {field_name}={value}")
    if overrides:
        config = dataclasses.replace(config, **overrides)

    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    dataset = load_pairs(data_dir)
    if not dataset:
        raise ValueError(f"no pair_*.asc files in {data_dir}")
    result = train(config, dataset, args.out)
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"trained {result.state.step} steps; final l_total={last.l_total:.6g}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    net = load_denoiser(args.ckpt)
    s = load_slice(args.input)
    img = hu_window_normalize(s, args.hu_lo, args.hu_hi)
    denoised = denoise_image(net, img)
    save_slice(normalized_to_hu(denoised, args.hu_lo, args.hu_hi), args.out)
    if args.png:
        save_png16(denoised, args.png)
    print(f"denoised {args.input} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_denoiser(args.ckpt)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    dataset = load_pairs(data_dir)
    if not dataset:
        raise ValueError(f"no pair_*.asc files in {data_dir}")
    report = evaluate(lambda img: denoise_image(net, img), dataset)
    Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    s = report.summary()
    print(
        f"evaluated {len(dataset)} pairs: "
        f"PSNR {s['psnr']['mean']:.2f}±{s['psnr']['std']:.2f} dB, "
        f"RMSE {s['rmse']['mean'] * 100:.2f}±{s['rmse']['std'] * 100:.2f} x1e-2, "
        f"SSIM {s['ssim']['mean'] * 100:.2f}±{s['ssim']['std'] * 100:.2f} %"
    )
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    net = load_denoiser(args.ckpt)
    s = load_slice(args.input)
    img = hu_window_normalize(s)
    result = cluster_features(net, img, args.k, args.seed)
    render_label_map(result.label_map, args.out)
    sidecar = {
        "k": args.k,
        "seed": args.seed,
        "iterations": result.iterations,
        "within_cluster_sse": result.within_cluster_sse,
    }
    sidecar_path = Path(args.out).with_suffix(".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"label map: {args.out} (sidecar: {sidecar_path})")
    return EXIT_OK


def _fail(code: int, message: str) -> int:
    flat = " ".join(str(message).split())
    print(f"error: {code}: {flat}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage/help
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, str(e))
    except ConfigError as e:
        return _fail(EXIT_BAD_CONFIG, str(e))
    except (SliceIOError, ContainerError, ValueError, KeyError) as e:
        return _fail(EXIT_BAD_DATA, str(e))
    except Exception as e:  # pragma: no cover - safety net
        return _fail(EXIT_ERROR, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
