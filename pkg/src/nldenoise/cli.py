"""Command-line entry point: ``nldenoise {denoise,eval,flops,noise,train}``.

Exit codes: 0 success, 2 bad arguments or empty dataset, 3 I/O failure,
4 model/shape mismatch. Failures print one line to stderr whose first token
is ``ERROR:<class>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import models
from .imagecore import ImageF32, ImageIOError, NoiseSpec, add_awgn, cpsnr, load_png, save_png
from .nn import count_flops, count_params
from .nn.params import WeightFileError, load_weights
from .pipeline import HybridDenoiser, Preprocessor, evaluate, rows_to_csv

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

METHODS = ("nlm", "bm3d", "hybrid-fixed", "hybrid-flex", "identity")
EXIT_USAGE, EXIT_IO, EXIT_MODEL = 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


# ----------------------------------------------------------------------------
# helpers


def _sigma_list(text: str) -> list:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be non-negative")
    return vals


def _size(text: str) -> tuple:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return h, w


def _parse_arch(arch: str, width: int, widths) -> models.ModelSpec:
    if arch.startswith("fixed:"):
        try:
            k = int(arch.split(":", 1)[1])
            return models.build_fixed(models.FixedNetConfig(K=k, width=width))
        except ValueError as exc:
            raise CliError("usage", f"bad arch {arch!r}: {exc}", EXIT_USAGE)
    if arch == "flex":
        cfg = models.FlexNetConfig(tuple(widths)) if widths else models.FlexNetConfig()
        return models.build_flexible(cfg)
    raise CliError("usage", f"arch must be fixed:K or flex, got {arch!r}", EXIT_USAGE)


def _load_image(path, rgb: bool = True) -> ImageF32:
    try:
        img = load_png(path)
    except (ImageIOError, OSError) as exc:
        raise CliError("io", str(exc), EXIT_IO)
    if rgb and img.channels == 1:
        img = ImageF32(np.repeat(img.data, 3, axis=0))
    return img


def _save_image(img: ImageF32, path, bitdepth: int) -> None:
    try:
        save_png(img, path, bitdepth=bitdepth)
    except ImageIOError as exc:
        raise CliError("io", str(exc), EXIT_IO)


def _resolve_weights(path):
    p = Path(path)
    if p.is_dir():
        return p / "weights.nlwt", p / "model.toml"
    sibling = p.with_suffix(".toml")
    return p, sibling if sibling.exists() else p.parent / "model.toml"


def load_model(path):
    wpath, spath = _resolve_weights(path)
    if not wpath.exists():
        raise CliError("io", f"weight file not found: {wpath}", EXIT_IO)
    if not spath.exists():
        raise CliError("io", f"model description not found beside weights: {spath}", EXIT_IO)
    try:
        params = load_weights(wpath)
        spec = models.ModelSpec.load(spath)
    except (WeightFileError, OSError) as exc:
        raise CliError("io", str(exc), EXIT_IO)
    except (ValueError, KeyError, TypeError, tomllib.TOMLDecodeError) as exc:
        raise CliError("model", f"invalid model description {spath}: {exc}", EXIT_MODEL)
    return spec, params


def build_denoiser(method: str, weights=None, preprocessor: str | None = None,
                   tile: int = 256, overlap: int | None = None) -> HybridDenoiser:
    if method in ("nlm", "bm3d", "identity"):
        return HybridDenoiser(Preprocessor(method))
    if weights is None:
        raise CliError("usage", f"--weights is required for {method}", EXIT_USAGE)
    spec, params = load_model(weights)
    pre = preprocessor or spec.meta.get("preprocessor", "bm3d")
    try:
        return HybridDenoiser(Preprocessor(pre), spec, params, flexible=method == "hybrid-flex",
                              tile=tile, overlap=overlap)
    except (ValueError, KeyError) as exc:
        raise CliError("model", str(exc).strip("'\""), EXIT_MODEL)


def _list_pngs(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise CliError("io", f"dataset directory not found: {d}", EXIT_IO)
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def _set_threads(n: int | None) -> None:
    if not n:
        return
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(n)


# ----------------------------------------------------------------------------
# subcommands


def cmd_denoise(args) -> int:
    noisy = _load_image(args.input)
    ref = _load_image(args.reference) if args.reference else None
    d = build_denoiser(args.method, args.weights, args.preprocessor, args.tile, args.overlap)
    noise = NoiseSpec(args.sigma, args.seed)
    try:
        out = d(noisy, noise)
    except ValueError as exc:
        raise CliError("model", str(exc), EXIT_MODEL)
    _save_image(out, args.output, args.bitdepth)
    if args.meta:
        meta = {"method": args.method, "sigma": args.sigma,
                "preprocessor": d.preprocessor.describe(args.sigma),
                "model": d.spec.meta if d.spec else None}
        Path(args.meta).write_text(json.dumps(meta, indent=2))
    if ref is not None:
        if ref.shape != out.shape:
            raise CliError("model", f"reference shape {ref.shape} != output {out.shape}", EXIT_MODEL)
        print(f"CPSNR {cpsnr(ref, out):.2f} dB")
    return 0


def cmd_eval(args) -> int:
    files = _list_pngs(args.dataset)
    if not files:
        raise CliError("data", f"no PNG images in {args.dataset}", EXIT_USAGE)
    if args.limit:
        files = files[:args.limit]
    images = [_load_image(f) for f in files]
    d = build_denoiser(args.method, args.weights, args.preprocessor, args.tile, args.overlap)
    name = args.name or Path(args.dataset).resolve().name
    log = logging.getLogger("nldenoise.eval")
    try:
        rows = evaluate(images, args.sigmas, d, dataset_name=name, method=args.method,
                        base_seed=args.seed,
                        progress=lambda s, i, v: log.info("sigma %g image %d: %.2f dB", s, i, v))
    except ValueError as exc:
        raise CliError("model", str(exc), EXIT_MODEL)
    text = rows_to_csv(rows)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise CliError("io", str(exc), EXIT_IO)
    else:
        sys.stdout.write(text)
    return 0


def cmd_flops(args) -> int:
    spec = _parse_arch(args.arch, args.width, args.widths)
    h, w = args.size
    try:
        report = count_flops(spec, (1, spec.in_channels, h, w))
    except ValueError as exc:
        raise CliError("model", str(exc), EXIT_MODEL)
    print(f"arch {args.arch}  input {spec.in_channels}x{h}x{w}")
    print(report.format())
    print(f"model size: {count_params(spec) / 1e6:.2f} MB")
    return 0


def cmd_noise(args) -> int:
    img = _load_image(args.input, rgb=not args.keep_gray)
    noisy = add_awgn(img, NoiseSpec(args.sigma, args.seed))
    _save_image(noisy, args.output, args.bitdepth)
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    files = _list_pngs(args.dataset)
    if not files:
        raise CliError("data", f"no PNG images in {args.dataset}", EXIT_USAGE)
    images = [_load_image(f) for f in files]
    val = []
    if args.val_dataset:
        val = [_load_image(f) for f in _list_pngs(args.val_dataset)]
    elif args.val_count:
        images, val = images[:-args.val_count], images[-args.val_count:]
    spec = _parse_arch(args.arch, args.width, args.widths)
    spec = models.ModelSpec(spec.arch, spec.layers, spec.in_channels, spec.out_channels,
                            spec.divisor, {**spec.meta, "preprocessor": args.preprocessor})
    try:
        cfg = TrainConfig(patch_size=args.patch_size, batch_size=args.batch_size, steps=args.steps,
                          lr=args.lr, sigma=args.sigma, sigma_range=args.sigma_range,
                          seed=args.seed, augment=not args.no_augment,
                          val_every=args.val_every, checkpoint_every=args.checkpoint_every)
        res = train(images, cfg, spec, Preprocessor(args.preprocessor), out_dir=args.out,
                    val_images=val, resume=args.resume, cache_dir=args.cache_dir)
    except ValueError as exc:
        raise CliError("usage", str(exc), EXIT_USAGE)
    print(f"final loss {res.losses[-1]:.5f}; checkpoint {res.checkpoint}" if res.losses
          else f"no steps run; checkpoint {res.checkpoint}")
    return 0


# ----------------------------------------------------------------------------
# parser


def _common(p, sigma_required=True):
    p.add_argument("--config", help="TOML file whose keys override defaults (CLI wins)")
    p.add_argument("--threads", type=int, default=None, help="cap internal parallelism")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nldenoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("denoise", help="denoise one PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--method", choices=METHODS, default="bm3d")
    p.add_argument("--weights")
    p.add_argument("--preprocessor", choices=("nlm", "bm3d", "identity"))
    p.add_argument("--reference", help="clean PNG; prints CPSNR of the result")
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--bitdepth", type=int, choices=(8, 16), default=8)
    p.add_argument("--meta", help="write a JSON description of the method used")
    _common(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="mean CPSNR over a directory of clean PNGs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sigmas", type=_sigma_list, default=[25.0, 35.0, 50.0, 75.0])
    p.add_argument("--method", choices=METHODS, default="bm3d")
    p.add_argument("--weights")
    p.add_argument("--preprocessor", choices=("nlm", "bm3d", "identity"))
    p.add_argument("--name", help="dataset label (defaults to the directory name)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="complexity report")
    p.add_argument("--arch", required=True, help="fixed:K or flex")
    p.add_argument("--size", type=_size, default=(512, 512))
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--widths", type=int, nargs=4)
    _common(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("noise", help="add white Gaussian noise to a PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--bitdepth", type=int, choices=(8, 16), default=8)
    p.add_argument("--keep-gray", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("train", help="desk-scale residual training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset")
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--arch", default="fixed:10")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--widths", type=int, nargs=4)
    p.add_argument("--preprocessor", choices=("nlm", "bm3d", "identity"), default="bm3d")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--sigma-range", type=_sigma_list, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--cache-dir")
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv``; values from a ``--config`` TOML file act as defaults that flags override.

    Keys meant for other subcommands are ignored so one manifest can drive several
    commands; keys no subcommand knows are an error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if known.config and command:
        try:
            with open(known.config, "rb") as fh:
                cfg = tomllib.load(fh)
        except OSError as exc:
            raise CliError("io", f"cannot read config {known.config}: {exc}", EXIT_IO)
        except tomllib.TOMLDecodeError as exc:
            raise CliError("usage", f"bad config {known.config}: {exc}", EXIT_USAGE)
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        everywhere = {a.dest for sp in subs.values() for a in sp._actions}
        unknown = set(cfg) - everywhere
        if unknown:
            raise CliError("usage", f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_USAGE)
        for a in subs[command]._actions:
            if a.dest not in cfg or a.dest == "config":
                continue
            val = cfg[a.dest]
            if a.dest in ("sigmas", "sigma_range"):
                val = _sigma_list(val) if isinstance(val, str) else [float(v) for v in val]
            elif a.dest == "size" and isinstance(val, str):
                val = _size(val)
            a.default = val
            a.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        if getattr(args, "sigma", None) is not None and args.sigma < 0:
            raise CliError("usage", "--sigma must be >= 0", EXIT_USAGE)
        _set_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"ERROR:{exc.kind} {exc}", file=sys.stderr)
        return exc.code
    except argparse.ArgumentTypeError as exc:
        print(f"ERROR:usage {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
