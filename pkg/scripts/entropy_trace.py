"""Per-frame standardized entropy of the frozen model along a stream.

Writes frame, raw and standardized entropy, the q-threshold and abs_rel to CSV,
then prints the mean over the five frames after each step change.

    python3 scripts/entropy_trace.py --checkpoint runs/checkpoint-train.ut3c \
        --stats runs/entropy-stats.txt --out runs/entropy-trace.csv
"""

import argparse
from pathlib import Path

import numpy as np

from streamttt import driftgen as dg
from streamttt.bench import write_csv
from streamttt.gradcore import Tensor
from streamttt.metrics import depth_metrics
from streamttt.scheduler import frame_entropy, load_stats
from streamttt.ymodel import MaskSpec, load_checkpoint, predict_depth, restore


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", type=Path, required=True)
    ap.add_argument("--stats", type=Path, required=True)
    ap.add_argument("--preset", default="mixed", choices=dg.PRESETS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--q", type=float, default=0.95)
    ap.add_argument("--out", type=Path, default=Path("entropy-trace.csv"))
    args = ap.parse_args()

    params = restore(load_checkpoint(args.checkpoint))
    stats = load_stats(args.stats)
    tau = stats.standardize(stats.threshold(args.q))
    schedule = dg.preset(args.preset)
    rows = []
    for f in dg.make_stream(schedule, args.seed, dg.default_length(args.preset)):
        kappa = frame_entropy(params, f.x, MaskSpec(), f.index)
        err = depth_metrics(predict_depth(Tensor(f.x), params).data, f.y).abs_rel
        rows.append({"frame": f.index, "entropy": kappa, "std_entropy": stats.standardize(kappa),
                     "threshold": tau, "above": stats.standardize(kappa) > tau, "abs_rel": err})
    print(f"wrote {write_csv(args.out, tuple(rows[0]), rows)}")

    std = np.array([r["std_entropy"] for r in rows])
    start = 0
    for seg in schedule.segments:
        if seg.interpolation == "step":
            print(f"step at frame {start}: mean std entropy over next 5 = {std[start:start + 5].mean():+.3f}"
                  f" (threshold {tau:+.3f})")
        start += seg.duration


if __name__ == "__main__":
    main()
