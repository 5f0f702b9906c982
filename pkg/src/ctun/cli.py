"""Command-line entry point: ``ctun <command> [flags]``.

Exit codes are 0 on success, 1 when a command fails at runtime (bad input
files, shape mismatches, failed checks) and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data, metrics, model, profiler, train
from .errors import CtunError, ShapeError
from .gradcheck import run_suite
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigFileError(CtunError):
    pass


# ------------------------------------------------------------ config files

def _coerce(value, default, key):
    try:
        if isinstance(default, tuple):
            return tuple(type(default[0])(v) for v in value.replace(" ", "").split(","))
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        return type(default)(value)
    except ValueError as exc:
        raise ConfigFileError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path):
    """Parse a flat ``key = value`` file into (model kwargs, train kwargs).

    Keys are CtunConfig and TrainConfig field names; ``#`` starts a comment.
    Tuples are written comma separated, e.g. ``blocks = 1,2,1``.
    """
    model_fields = {f.name: f.default for f in dataclasses.fields(model.CtunConfig)}
    train_fields = {f.name: f.default for f in dataclasses.fields(train.TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_fields:
            model_kw[key] = _coerce(value, model_fields[key], key)
        elif key in train_fields:
            train_kw[key] = _coerce(value, train_fields[key], key)
        else:
            raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
    return model_kw, train_kw


def infer_config(store):
    """Recover the architecture hyperparameters from a weight store's names and shapes."""
    try:
        channels = store["extract.conv_in.weight"].shape[0]
    except KeyError:
        raise ShapeError("weights", "missing tensor extract.conv_in.weight") from None

    def count(prefix):
        return len({n.split(".")[1] for n in store if n.startswith(prefix + ".res")})

    stages = len({n.split(".")[1] for n in store if n.startswith("recon.up")})
    variant = "split" if "hu.gru.expand.weight" in store else "shared"
    return model.CtunConfig(channels=channels, blocks=(count("extract"), count("prop"), count("recon")),
                            scale=2 ** stages, ugru_variant=variant)


# ---------------------------------------------------------------- commands

def cmd_degrade(args, parser):
    if args.mode == "bi" and args.sigma is not None:
        parser.error("--sigma only applies to --mode bd")
    spec = data.DegradationSpec(args.mode.upper(), args.scale,
                                args.sigma if args.sigma is not None else data.BD_SIGMA)
    seq = data.load_sequence(args.inp)
    out = data.degrade(seq, spec)
    data.save_sequence(out, args.out)
    (h, w), (ho, wo) = seq.size, out.size
    print(f"{spec.mode} x{spec.scale}: {len(seq)} frames {h}x{w} -> {len(out)} frames {ho}x{wo}")
    return EXIT_OK


def _model_config(args, weights=None):
    if args.config:
        model_kw, _ = read_config_file(args.config)
        config = model.CtunConfig(**model_kw)
    elif weights is not None:
        config = infer_config(weights)
    else:
        config = model.CtunConfig(**model.DESK_CONFIG)
    if getattr(args, "ugru", None):
        config = dataclasses.replace(config, ugru_variant=args.ugru)
    return config


def cmd_sr(args, parser):
    weights = data.load_weights(args.weights)
    config = _model_config(args, weights)
    weights.check_against(config)
    seq = data.load_sequence(args.inp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = 0.0
    with no_grad():
        frames = model.stream_super_resolve(seq.frames, weights, config)
        for i in range(len(seq)):
            start = time.perf_counter()
            y = next(frames)
            elapsed = time.perf_counter() - start
            total += elapsed
            data.save_frame(Tensor(np.clip(y.data, 0.0, 1.0)), out_dir / data.frame_name(i))
            print(f"frame {i:4d}  {1000 * elapsed:9.1f} ms")
    h, w = seq.size
    print(f"{len(seq)} frames {h}x{w} -> {h * config.scale}x{w * config.scale} "
          f"({config.ugru_variant} U-GRU), mean {1000 * total / len(seq):.1f} ms/frame")
    return EXIT_OK


def _metric_planes(frame, y_channel, crop):
    """Planes in 0-255 units: one luma plane or three RGB planes."""
    if y_channel:
        planes = [data.rgb_to_y(frame).data[0, 0].astype(np.float64)]
    else:
        planes = [frame.data[0, c].astype(np.float64) * 255.0 for c in range(3)]
    if crop:
        planes = [p[crop:-crop, crop:-crop] for p in planes]
    return planes


def cmd_eval(args, parser):
    pred = data.load_sequence(args.pred)
    gt = data.load_sequence(args.gt)
    if len(pred) != len(gt):
        raise ShapeError("eval", "frame counts differ", len(gt), len(pred))
    if pred.size != gt.size:
        raise ShapeError("eval", "frame sizes differ", gt.size, pred.size)
    if 2 * args.crop_border >= min(gt.size):
        raise ShapeError("eval", "crop border leaves no pixels", f"< {min(gt.size) // 2}", args.crop_border)
    psnrs, ssims = [], []
    for i, (p, g) in enumerate(zip(pred.frames, gt.frames)):
        pp = _metric_planes(p, args.y_channel, args.crop_border)
        gp = _metric_planes(g, args.y_channel, args.crop_border)
        pv = metrics.psnr(np.stack(pp), np.stack(gp))
        sv = float(np.mean([metrics.ssim(a, b) for a, b in zip(pp, gp)]))
        psnrs.append(pv)
        ssims.append(sv)
        print(f"frame {i:4d}  PSNR {pv:8.4f} dB  SSIM {sv:.6f}")
    channel = "Y" if args.y_channel else "RGB"
    print(f"mean ({channel}, {len(psnrs)} frames)  PSNR {np.mean(psnrs):8.4f} dB  SSIM {np.mean(ssims):.6f}")
    return EXIT_OK


def cmd_train(args, parser):
    model_kw, train_kw = read_config_file(args.config) if args.config else ({}, {})
    model_kw = {**model.DESK_CONFIG, **model_kw}
    for key, value in (("channels", args.channels), ("blocks", args.blocks), ("ugru_variant", args.ugru)):
        if value is not None:
            model_kw[key] = value
    for key, value in (("iters", args.iters), ("seed", args.seed), ("frames", args.frames),
                       ("patch", args.patch), ("lr0", args.lr)):
        if value is not None:
            train_kw[key] = value
    config = model.CtunConfig(**model_kw)
    tconf = train.TrainConfig(**train_kw)
    csv_path = Path(args.csv) if args.csv else Path(args.out).with_suffix(".csv")
    params, history = train.train_loop(config, tconf)
    data.save_weights(params, args.out)
    train.write_history_csv(history, csv_path)
    print(f"wrote {args.out} ({params.numel():,} parameters) and {csv_path} ({len(history)} rows)")
    return EXIT_OK


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonnegative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _blocks(text):
    try:
        blocks = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma separated counts, got {text!r}") from None
    if len(blocks) != 3 or min(blocks) < 1:
        raise argparse.ArgumentTypeError(f"expected three comma separated counts >= 1, got {text!r}")
    return blocks


def cmd_profile(args, parser):
    weights = data.load_weights(args.weights) if args.weights else None
    config = _model_config(args, weights)
    if weights is not None:
        weights.check_against(config)
    h, w = args.size
    report = profiler.profile_inference(config, weights, n=args.frames, height=h, width=w, seed=args.seed)
    print(report.format_text())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args, parser):
    start = time.perf_counter()
    results = run_suite(seed=args.seed)
    failed = 0
    for name, err, tol in results:
        ok = err < tol
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'}  {name:<22} max rel err {err:.3e}  (tol {tol:.0e})")
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return EXIT_FAILURE if failed else EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(prog="ctun", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("degrade", help="synthesise LR frames from an HR sequence")
    p.add_argument("--in", dest="inp", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--mode", choices=("bi", "bd"), default="bi")
    p.add_argument("--scale", type=_positive_int, default=4)
    p.add_argument("--sigma", type=float, default=None, help=f"BD blur sigma (default {data.BD_SIGMA})")
    p.set_defaults(parser=p, func=cmd_degrade)

    p = sub.add_parser("sr", help="super-resolve a PNG sequence")
    p.add_argument("--in", dest="inp", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--weights", required=True, metavar="FILE")
    p.add_argument("--config", metavar="FILE", help="key=value model config; inferred from weights if omitted")
    p.add_argument("--ugru", choices=model.UGRU_VARIANTS)
    p.set_defaults(parser=p, func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--y-channel", action="store_true", help="score BT.601 luma instead of RGB")
    p.add_argument("--crop-border", type=_nonnegative_int, default=4, metavar="PX")
    p.set_defaults(parser=p, func=cmd_eval)

    p = sub.add_parser("train", help="train on synthetic sequences")
    p.add_argument("--out", required=True, metavar="WEIGHTS")
    p.add_argument("--csv", metavar="FILE", help="loss log (default: WEIGHTS with .csv suffix)")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--iters", type=_nonnegative_int)
    p.add_argument("--channels", type=_positive_int)
    p.add_argument("--blocks", type=_blocks, metavar="E,P,R")
    p.add_argument("--ugru", choices=model.UGRU_VARIANTS)
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--patch", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(parser=p, func=cmd_train)

    p = sub.add_parser("profile", help="params, FLOPs, MACs, peak memory and latency")
    p.add_argument("--config", metavar="FILE", help="key=value model config (default: desk scale)")
    p.add_argument("--weights", metavar="FILE")
    p.add_argument("--ugru", choices=model.UGRU_VARIANTS)
    p.add_argument("--frames", type=_positive_int, default=8)
    p.add_argument("--size", type=_parse_size, default=(32, 32), metavar="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", metavar="FILE", help="also write the report as JSON")
    p.set_defaults(parser=p, func=cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(parser=p, func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args, args.parser)
    except SystemExit as exc:  # parser.error inside a command
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (CtunError, OSError, ValueError) as exc:
        print(f"ctun {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
