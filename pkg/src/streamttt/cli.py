"""Command-line entry point: train, calibrate, stream, sweep, show."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import driftgen as dg
from .adapter import DEFAULT_TTT_LR, TTTConfig
from .bench import (CALIBRATION_SEED_OFFSET, RunConfig, TrainConfig, run_stream, sweep, train_source,
                    write_csv, write_sweep, write_sweep_timing)
from .gradcore import NumericError
from .scheduler import CalibrationError, Policy, calibrate, load_stats, save_stats
from .ymodel import CheckpointError, MaskSpec, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CHECKPOINT_NAME = "checkpoint-train.ut3c"
STATS_NAME = "entropy-stats.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="file of `key = value` lines; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    return p


def _stream_flags(p: argparse.ArgumentParser, default_policy: str) -> None:
    p.add_argument("--preset", default="mixed", choices=dg.PRESETS)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--policy", default=default_policy, help="kind[:param]")
    p.add_argument("--mode", default="scratch", choices=("scratch", "warm"))
    p.add_argument("--variant", default="uss_mae", choices=("plain_ss", "uss_mae", "combined"))
    p.add_argument("--steps", type=int, default=16, help="TTT steps per keyframe (Q)")
    p.add_argument("--lr", type=float, default=DEFAULT_TTT_LR, help="TTT learning rate")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--stats", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="streamttt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train the source model")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--frames", type=int, default=20_000, help="frames per epoch")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate")

    p = sub.add_parser("calibrate", parents=[common], help="source entropy statistics")
    p.add_argument("--length", type=int, default=200, help="source validation frames")
    p.add_argument("--checkpoint", type=Path, default=None)

    p = sub.add_parser("stream", parents=[common], help="run one policy over one stream")
    _stream_flags(p, "always")
    p.add_argument("--dump", type=Path, default=None, help="also write the frames to this file")

    p = sub.add_parser("sweep", parents=[common], help="policy grid over one stream")
    _stream_flags(p, "always")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("show", parents=[common], help="print a checkpoint or stats file")
    p.add_argument("path", type=Path)
    return parser


def read_config(path: Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected `key = value`")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"{args.config}: unknown keys {', '.join(unknown)}")
    # string defaults go through each flag's type conversion, and explicit flags still win
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _checkpoint_path(args) -> Path:
    path = args.checkpoint if args.checkpoint is not None else args.out / CHECKPOINT_NAME
    if not path.exists():
        raise UsageError(f"checkpoint file not found: {path} (run `train` first)")
    return path


def cmd_train(args) -> int:
    cfg = TrainConfig(seed=args.seed, epochs=args.epochs, frames_per_epoch=args.frames, lr=args.lr)
    result = train_source(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, args.out / CHECKPOINT_NAME)
    write_csv(args.out / "train-curve.csv", ("step", "lr", "loss"), result.curve)
    print(f"wrote {args.out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ckpt = load_checkpoint(_checkpoint_path(args))
    frames = dg.make_stream(dg.preset("source"), args.seed + CALIBRATION_SEED_OFFSET, args.length)
    stats = calibrate(frames, ckpt, MaskSpec())
    args.out.mkdir(parents=True, exist_ok=True)
    path = save_stats(stats, args.out / STATS_NAME)
    print(f"wrote {path}: mean {stats.kappa_bar:.6g}, variance {stats.v_kappa:.6g}, "
          f"tau(0.95) {stats.threshold(0.95):.6g}")
    return EXIT_OK


def _run_config(args, policy: Policy) -> RunConfig:
    ttt = TTTConfig(variant=args.variant, steps=args.steps, lr=args.lr, mode=args.mode)
    stats = args.stats if args.stats is not None else args.out / STATS_NAME
    return RunConfig(_checkpoint_path(args), args.preset, args.seed, args.length, policy, ttt, stats)


def _policy(args) -> Policy:
    try:
        return Policy.parse(args.policy, seed=args.seed)
    except ValueError as exc:
        raise UsageError(f"bad --policy {args.policy!r}: {exc}") from exc


def cmd_stream(args) -> int:
    policy = _policy(args)
    cfg = _run_config(args, policy)
    if policy.needs_entropy and not Path(cfg.stats).exists():
        raise UsageError(f"entropy stats file not found: {cfg.stats} (run `calibrate` first)")
    if args.dump is not None:
        frames = list(dg.make_stream(dg.preset(cfg.preset), cfg.seed, cfg.stream_length()))
        dg.dump_stream(args.dump, frames, cfg.seed, cfg.preset)
    rec = run_stream(cfg)
    path = rec.write_csv(args.out / f"stream-{cfg.label()}.csv")
    rec.write_timing(args.out / f"stream-{cfg.label()}.timing.csv")
    s = rec.summary
    print(f"wrote {path}: abs_rel {s['abs_rel']:.4f}, keyframes {s['keyframe']}/{len(rec.rows)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args, Policy("always"))
    if not Path(cfg.stats).exists():
        print(f"warning: entropy stats file not found: {cfg.stats}; uncertainty runs will fail",
              file=sys.stderr)
    rows, wall = sweep(cfg, run_dir=args.out / f"sweep-{cfg.preset}", workers=args.workers)
    path = write_sweep(args.out / f"sweep-{cfg.preset}.csv", rows)
    write_sweep_timing(args.out / f"sweep-{cfg.preset}.timing.csv", rows, wall)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {path}: {len(rows)} runs, {failed} failed")
    return EXIT_OK


def cmd_show(args) -> int:
    path = args.path
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    head = path.read_bytes()[:4]
    if head == b"UT3C":
        ckpt = load_checkpoint(path)
        print(f"checkpoint {path}  tag={ckpt.tag}  tensors={len(ckpt.arrays)}  "
              f"values={sum(a.size for a in ckpt.arrays)}")
        for k, a in enumerate(ckpt.arrays):
            print(f"  [{k:2d}] shape={'x'.join(map(str, a.shape)):>9}  "
                  f"mean={a.mean():+.4e}  rms={np.sqrt(np.mean(a * a)):.4e}")
    elif head == dg.DUMP_MAGIC:
        meta, frames = dg.load_stream_dump(path)
        print(f"stream dump {path}  " + "  ".join(f"{k}={v}" for k, v in meta.items()))
    else:
        stats = load_stats(path)
        print(f"entropy stats {path}  frames={len(stats.source_entropies)}  "
              f"mean={stats.kappa_bar:.10g}  variance={stats.v_kappa:.10g}")
        for q, t in sorted(stats.tau.items()):
            print(f"  tau({q:g}) = {t:.10g}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "stream": cmd_stream,
            "sweep": cmd_sweep, "show": cmd_show}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        if isinstance(exc, (NumericError, CalibrationError)):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
