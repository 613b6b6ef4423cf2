"""Bytes per frame shared by the cooperative agent at each transmission level.

    python scripts/payload_table.py > payload.csv
"""
import argparse
import sys

from xetv2x.config import load_config
from xetv2x.experiment import emit_payload, payload_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    rows = payload_rows(load_config(args.config), seed=args.seed)
    sys.stdout.write(emit_payload(rows))
    for r in rows:
        print(f"# {r['preset']}/{r['modality']}: raw/feature {r['raw'] / r['feature']:.1f}x, "
              f"feature/instance {r['feature'] / r['instance']:.1f}x", file=sys.stderr)


if __name__ == "__main__":
    main()
