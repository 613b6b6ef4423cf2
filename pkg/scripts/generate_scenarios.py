"""Simulate and save every preset for a range of seeds.

    python scripts/generate_scenarios.py --seeds 0 1 2 --out runs/scenarios
"""
import argparse
from pathlib import Path

from xetv2x.scenario import PRESETS, get_preset, save_scenario, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--presets", nargs="+", choices=sorted(PRESETS), default=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/scenarios")
    args = ap.parse_args()
    for name in args.presets:
        for seed in args.seeds:
            scn = simulate(get_preset(name), seed)
            path, _ = save_scenario(scn, Path(args.out) / f"{name}_seed{seed}.json")
            n_gt = sum(len(g) for g in scn.gt)
            print(f"{path}: {len(scn)} frames, {n_gt} GT boxes, cooperative agent {scn.other_id}")


if __name__ == "__main__":
    main()
