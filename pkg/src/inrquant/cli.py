"""Command-line pipeline: gen, train, quantize, sweep, eval, decode, defaults.

Exit codes: 0 success, 2 usage, 3 infeasible rate target, 4 corrupt data or stream.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .allocator import InfeasibleTarget
from .calibrate import trace_csv
from .codec import BitstreamError, bpp, decode, encode, rd_csv
from .config import ConfigError, RunConfig
from .nervlite import (
    CheckpointFormatError,
    SpecError,
    TrainingError,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pipeline import evaluate_stream, quantize, sweep
from .video import ClipFormatError, load_clip, save_clip, synthetic_clip

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_CORRUPT = 0, 2, 3, 4
RD_SCHEMA = "rd/1"

logger = logging.getLogger("inrquant")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--checkpoint", type=Path)
    quant.add_argument("--clip", type=Path)
    quant.add_argument("--target-bits", help="average bits per parameter, comma-separated for sweeps")
    quant.add_argument("--calib-iters", type=int)
    quant.add_argument("--lambda", dest="lam", type=float)
    quant.add_argument("--granularity", choices=("network", "layer"))
    quant.add_argument("--steps", choices=("channel", "layer"))

    p = argparse.ArgumentParser(prog="inrquant", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="write a seeded synthetic clip")
    g.add_argument("--frames", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--motif", choices=("blobs", "gradient", "checker-drift"))
    t = sub.add_parser("train", parents=[common], help="fit a model to a clip")
    t.add_argument("--clip", type=Path)
    t.add_argument("--epochs", type=int)
    sub.add_parser("quantize", parents=[common, quant], help="allocate, calibrate and encode one target")
    sub.add_parser("sweep", parents=[common, quant], help="R-D sweep over several targets")
    e = sub.add_parser("eval", parents=[common], help="decode a stream and report PSNR and bpp")
    e.add_argument("--stream", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--clip", type=Path)
    d = sub.add_parser("decode", parents=[common], help="decode a stream to integer symbols and steps")
    d.add_argument("--stream", type=Path, required=True)
    sub.add_parser("defaults", parents=[common], help="print the default configuration")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "clip.frames": getattr(args, "frames", None),
        "clip.height": getattr(args, "height", None),
        "clip.width": getattr(args, "width", None),
        "clip.motif": getattr(args, "motif", None),
        "train.epochs": getattr(args, "epochs", None),
        "calib.iterations": getattr(args, "calib_iters", None),
        "calib.lambda": getattr(args, "lam", None),
        "calib.granularity": getattr(args, "granularity", None),
        "quant.steps": getattr(args, "steps", None),
        "rate.targets": getattr(args, "target_bits", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, str(value))
    return cfg


def _path(args, attr: str, cfg: RunConfig, key: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value is not None else Path(cfg[key])


def _quant_kwargs(cfg: RunConfig) -> dict:
    return dict(
        opts=cfg.calib_options(),
        granularity=cfg["calib.granularity"],
        steps=cfg["quant.steps"],
        candidate_bits=cfg["rate.candidate_bits"],
        cap=cfg["rate.cap"],
        tol=cfg["rate.tolerance"],
    )


def _header(cfg: RunConfig) -> str:
    return f"# schema={RD_SCHEMA} seed={cfg['seed']}\n"


def cmd_gen(args, cfg: RunConfig) -> int:
    clip = synthetic_clip(cfg["seed"], cfg["clip.frames"], cfg["clip.height"], cfg["clip.width"], cfg["clip.motif"])
    out = _path(args, "out", cfg, "path.clip")
    save_clip(clip, out)
    print(f"seed={cfg['seed']} wrote {out} ({clip.frames}x{clip.height}x{clip.width}, {cfg['clip.motif']})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    clip = load_clip(_path(args, "clip", cfg, "path.clip"))
    spec = cfg.model_spec()
    spec.check_clip(*clip.dims)
    ckpt = train(build_model(spec, cfg["seed"]), clip, cfg.train_options())
    out = _path(args, "out", cfg, "path.checkpoint")
    save_checkpoint(ckpt, out)
    print(f"seed={cfg['seed']} params={ckpt.n_params} final_loss={ckpt.meta['final_loss']:.6e} wrote {out}")
    return EXIT_OK


def _inputs(args, cfg):
    ckpt = load_checkpoint(_path(args, "checkpoint", cfg, "path.checkpoint"))
    clip = load_clip(_path(args, "clip", cfg, "path.clip"))
    ckpt.spec.check_clip(*clip.dims)
    return ckpt, clip


def cmd_quantize(args, cfg: RunConfig) -> int:
    targets = cfg.targets()
    if len(targets) != 1:
        raise UsageError("quantize takes exactly one --target-bits value (use sweep for several)")
    ckpt, clip = _inputs(args, cfg)
    res = quantize(ckpt, clip, targets[0], **_quant_kwargs(cfg))
    out = _path(args, "out", cfg, "path.out").with_suffix(".inrq")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(res.stream.raw)
    out.with_suffix(".candidates.csv").write_text(_header(cfg) + res.allocation.to_csv())
    if res.trace:
        out.with_suffix(".trace.csv").write_text(_header(cfg) + trace_csv(res.trace))
    sys.stdout.write(_header(cfg) + rd_csv([res.point]))
    print(f"# wrote {out} container_bytes={res.rate.container_bytes}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    ckpt, clip = _inputs(args, cfg)
    targets = cfg.targets()
    if len(targets) < 2:
        raise UsageError("sweep needs at least two targets")
    results = sweep(ckpt, clip, targets, **_quant_kwargs(cfg))
    if not results:
        raise InfeasibleTarget("no sweep target was feasible")
    out = _path(args, "out", cfg, "path.out")
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        tag = f"{r.point.target_bits / ckpt.n_params:g}"  # average bits per parameter
        (out / f"stream_{tag}.inrq").write_bytes(r.stream.raw)
        (out / f"candidates_{tag}.csv").write_text(_header(cfg) + r.allocation.to_csv())
    text = _header(cfg) + rd_csv([r.point for r in results])
    (out / "rd.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    raw = Path(args.stream).read_bytes()
    ckpt, clip = _inputs(args, cfg)
    decoded = decode(raw, ckpt.spec.digest())
    mean, per_frame = evaluate_stream(decoded, ckpt, clip)
    rate = bpp(decoded.stream, *clip.dims)
    print(f"seed={cfg['seed']}")
    for t, v in enumerate(per_frame):
        print(f"frame {t} psnr {v:.4f}")
    print(f"psnr {mean:.4f}")
    print(f"bpp {rate.total:.6f} (weights {rate.weights:.6f}, steps {rate.steps:.6f})")
    print(f"container_bytes {rate.container_bytes}")
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    raw = Path(args.stream).read_bytes()
    dec = decode(raw)
    reencoded = encode(dec.spec_digest, dec.model, dec.order).raw
    print(f"seed={cfg['seed']} config={'-'.join(map(str, dec.config))} layers={len(dec.order)}")
    print(f"spec_digest {dec.spec_digest.hex()}")
    print(f"reencode_identical {reencoded == raw}")
    if args.out is not None:
        arrays = {}
        for n in dec.order:
            arrays[f"{n}.ints"] = dec.model.ints[n]
            arrays[f"{n}.steps"] = dec.model.steps[n]
        with open(args.out, "wb") as fh:
            np.savez(fh, **arrays)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_defaults(args, cfg: RunConfig) -> int:
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "defaults": cmd_defaults,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except InfeasibleTarget as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.nearest:
            print(f"hint: nearest feasible sizes {list(exc.nearest)} bits", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (BitstreamError, ClipFormatError, CheckpointFormatError, TrainingError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (UsageError, ConfigError, SpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
