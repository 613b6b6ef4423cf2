"""Command line entry point.

    python -m xetv2x.cli generate --preset intersection --seed 0
    python -m xetv2x.cli train    --variant XET-V2X
    python -m xetv2x.cli run      --variant XET-V2X --latency-frames 1 --seed 0
    python -m xetv2x.cli sweep    --preset moving --seed 1
    python -m xetv2x.cli ablate   --seed 0
    python -m xetv2x.cli payload

Exit codes: 0 success, 2 usage error, 1 numeric failure. The default output
root is $XETV2X_OUT (else ./runs).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import load_config
from .coop_attention import FUSION_ORDERS, IMAGE_FIRST
from .evaluation import emit_report
from .experiment import (
    LATENCIES,
    ExperimentSpec,
    UsageError,
    default_grid,
    emit_payload,
    ensure_checkpoint,
    fusion_grid,
    payload_rows,
    run_experiment,
    sweep,
)
from .model import VARIANTS
from .numerics import ConfigError, IntegrityError, NumericError
from .scenario import PRESETS, get_preset, save_scenario, simulate

OUT_ENV = "XETV2X_OUT"


def _common(p: argparse.ArgumentParser, seed=True, preset=True):
    if preset:
        p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                       help="scenario preset (default: from --config, else intersection)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="evaluation scenario seed")
    p.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--config", default=None, help="INI file layered over the base config")
    p.add_argument("--base", choices=("desk", "full"), default="desk", help="base config preset")


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--variant", choices=list(VARIANTS), default="XET-V2X")
    p.add_argument("--fusion-order", choices=FUSION_ORDERS, default=IMAGE_FIRST)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xetv2x", description="Cooperative BEV detection and tracking experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="simulate and save one scenario")
    _common(g)

    t = sub.add_parser("train", help="train a variant (cached by config hash)")
    _model_flags(t)
    _common(t, seed=False)
    t.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")

    r = sub.add_parser("run", help="train or load, evaluate one spec, write a report row")
    _model_flags(r)
    r.add_argument("--latency-frames", type=int, default=None, choices=LATENCIES,
                   help="channel delay in frames (V2X variants only)")
    _common(r)
    m = r.add_mutually_exclusive_group()
    m.add_argument("--train", dest="mode", action="store_const", const="train", help="retrain before evaluating")
    m.add_argument("--eval-only", dest="mode", action="store_const", const="eval-only",
                   help="fail instead of training when no checkpoint exists")

    s = sub.add_parser("sweep", help="variant x latency grid (12 rows) as one CSV")
    s.add_argument("--fusion-order", choices=FUSION_ORDERS, default=IMAGE_FIRST)
    s.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=None, help="restrict the grid")
    _common(s)
    s.add_argument("--eval-only", dest="mode", action="store_const", const="eval-only", default="auto")

    a = sub.add_parser("ablate", help="fusion-order ablation for the two-modality variants")
    _common(a)
    a.add_argument("--eval-only", dest="mode", action="store_const", const="eval-only", default="auto")

    p = sub.add_parser("payload", help="bytes per frame at the raw, feature and instance levels")
    _common(p)
    return ap


def _out(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.base)
        out = _out(args)
        preset = getattr(args, "preset", None) or cfg.preset
        if args.cmd == "generate":
            scn = simulate(get_preset(preset), args.seed)
            path, side = save_scenario(scn, out / "scenarios" / f"{preset}_seed{args.seed}.json")
            print(path)
        elif args.cmd == "train":
            spec = ExperimentSpec(args.variant, None, args.fusion_order, preset, 0, str(out))
            _, ck = ensure_checkpoint(spec, cfg, out, "train" if args.force else "auto")
            print(ck)
        elif args.cmd == "run":
            spec = ExperimentSpec(args.variant, args.latency_frames, args.fusion_order, preset, args.seed, str(out))
            row = run_experiment(spec, cfg, args.mode or "auto")
            sys.stdout.write(emit_report([row]))
        elif args.cmd == "sweep":
            grid = default_grid(preset, args.seed, args.fusion_order, str(out))
            if args.variants:
                grid = [g for g in grid if g.variant in args.variants]
            name = f"sweep_{preset}_{args.fusion_order}_s{args.seed}.csv"
            sys.stdout.write(sweep(grid, cfg, args.mode, out / name))
        elif args.cmd == "ablate":
            sys.stdout.write(sweep(fusion_grid(preset, args.seed, str(out)), cfg, args.mode,
                                   out / f"ablation_{preset}_s{args.seed}.csv"))
        elif args.cmd == "payload":
            text = emit_payload(payload_rows(cfg, [args.preset] if args.preset else None, args.seed))
            out.mkdir(parents=True, exist_ok=True)
            (out / f"payload_s{args.seed}.csv").write_text(text)
            sys.stdout.write(text)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"xetv2x: error: {e}", file=sys.stderr)
        return 2
    except (NumericError, IntegrityError) as e:
        print(f"xetv2x: numeric failure: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
