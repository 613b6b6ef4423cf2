"""Image-first vs point-cloud-first fusion for XET-V and XET-V2X.

    python scripts/fusion_ablation.py --seeds 0 1 2 --out runs
"""
import argparse
import logging
from pathlib import Path

from xetv2x.config import load_config
from xetv2x.evaluation import read_report
from xetv2x.experiment import fusion_grid, sweep
from xetv2x.scenario import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="intersection")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config)
    for seed in args.seeds:
        path = Path(args.out) / f"fusion_{args.preset}_s{seed}.csv"
        rows = read_report(sweep(fusion_grid(args.preset, seed, args.out), cfg, path=path))
        print(f"seed {seed} ({path})")
        for r in rows:
            print(f"  {r['variant']:<8} {r['fusion_order']:<17} mAP {float(r['mAP']):.3f} "
                  f"AMOTA {float(r['AMOTA']):.3f} AMOTP {float(r['AMOTP']):.3f}")


if __name__ == "__main__":
    main()
