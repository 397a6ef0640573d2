"""Accuracy/cost sweep on one preset, printing the Pareto front.

Trains and calibrates first when the run directory has no checkpoint or stats.

    python3 scripts/pareto_sweep.py --preset mixed --out runs
"""

import argparse
from pathlib import Path

from streamttt import driftgen as dg
from streamttt.bench import (CALIBRATION_SEED_OFFSET, RunConfig, TrainConfig, sweep, train_source,
                             write_sweep)
from streamttt.cli import CHECKPOINT_NAME, STATS_NAME
from streamttt.scheduler import calibrate, load_stats, save_stats
from streamttt.ymodel import load_checkpoint, save_checkpoint


def pareto_front(rows):
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: (r["cost_per_frame"], r["mean_abs_rel"]))
    front, best = [], float("inf")
    for r in ok:
        if r["mean_abs_rel"] < best:
            front.append(r)
            best = r["mean_abs_rel"]
    return front


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", default="mixed", choices=dg.PRESETS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--length", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    ckpt_path, stats_path = args.out / CHECKPOINT_NAME, args.out / STATS_NAME
    if not ckpt_path.exists():
        print("training source model ...")
        save_checkpoint(train_source(TrainConfig(seed=args.seed)).checkpoint, ckpt_path)
    ckpt = load_checkpoint(ckpt_path)
    if not stats_path.exists():
        frames = dg.make_stream(dg.preset("source"), args.seed + CALIBRATION_SEED_OFFSET, 200)
        save_stats(calibrate(frames, ckpt), stats_path)
    stats = load_stats(stats_path)

    base = RunConfig(ckpt_path, args.preset, args.seed, args.length)
    rows, _ = sweep(base, checkpoint=ckpt, stats=stats, run_dir=args.out / f"sweep-{args.preset}",
                    workers=args.workers)
    print(f"wrote {write_sweep(args.out / f'sweep-{args.preset}.csv', rows)}")
    print(f"{'strategy':<12} {'param':>6} {'mode':<8} {'abs_rel':>8} {'cost':>7}")
    for r in pareto_front(rows):
        param = "" if r["parameter"] is None else f"{r['parameter']:g}"
        print(f"{r['strategy']:<12} {param:>6} {r['mode']:<8} {r['mean_abs_rel']:8.4f} {r['cost_per_frame']:7.2f}")


if __name__ == "__main__":
    main()
