"""Variant x latency grid over several evaluation seeds.

    python scripts/latency_sweep.py --preset moving --seeds 0 1 2 --out runs

Writes one sweep CSV per seed plus a seed-averaged summary on stdout.
Checkpoints are shared across seeds and latencies.
"""
import argparse
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from xetv2x.config import load_config
from xetv2x.evaluation import read_report
from xetv2x.experiment import default_grid, sweep
from xetv2x.scenario import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="intersection")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config)
    agg = defaultdict(list)
    for seed in args.seeds:
        path = Path(args.out) / f"sweep_{args.preset}_s{seed}.csv"
        text = sweep(default_grid(args.preset, seed, out=args.out), cfg, path=path)
        for r in read_report(text):
            agg[r["variant"], r["latency_frames"]].append([float(r[k]) for k in ("mAP", "AMOTA", "AMOTP")])
        print(f"wrote {path}")
    print(f"{'variant':<9} {'lat':>3} {'mAP':>7} {'AMOTA':>7} {'AMOTP':>7}  (mean of {len(args.seeds)} seeds)")
    for (v, lat), vals in agg.items():
        m = np.mean(vals, axis=0)
        print(f"{v:<9} {lat or '-':>3} {m[0]:7.3f} {m[1]:7.3f} {m[2]:7.3f}")


if __name__ == "__main__":
    main()
