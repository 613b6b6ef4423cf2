"""Experiment orchestration: one spec -> trained (or cached) model -> metrics row.

Output layout under ``out``::

    checkpoints/<train hash>.ckpt      weights, shared by every run with that training setup
    checkpoints/<train hash>.curve.csv loss curve
    scenarios/<preset>_seed<seed>.json evaluation scenario (+ .json.bin sidecar)
    runs/<run name>/report.csv         one metrics row
    runs/<run name>/config.json        full config snapshot
    runs/<run name>/results.txt        per-frame detections with track ids

``ExperimentSpec.seed`` picks the evaluation scenario. Initialization and the training
scenarios come from ``train.seed`` so one checkpoint serves every latency and
evaluation seed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .config import DESK, ExperimentConfig, config_dict, config_hash
from .coop_attention import FUSION_ORDERS, IMAGE_FIRST
from .evaluation import compute_amota_amotp, compute_map, emit_report
from .model import VARIANTS, Model, variant_flags
from .numerics import ConfigError, derive_seed
from .pipeline import run_sequence
from .scenario import PRESETS, Scenario, get_preset, payload_account, save_scenario, simulate
from .track_engine import assemble_output
from .train_assign import load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

LATENCIES = (0, 1, 2)


class UsageError(ConfigError):
    """Invalid experiment request (maps to exit code 2)."""


@dataclass(frozen=True)
class ExperimentSpec:
    variant: str = "XET-V2X"
    latency_frames: Optional[int] = None  # None: not requested (reported as 0 for V2X variants)
    fusion_order: str = IMAGE_FIRST
    preset: str = "intersection"
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        coop = variant_flags(self.variant)["coop"]
        if self.latency_frames is not None:
            if not coop:
                raise UsageError(f"{self.variant} is a single-view variant (ego viewpoint only in the variant "
                                 "table); it has no communication channel, so a latency cannot be set")
            if self.latency_frames not in LATENCIES:
                raise UsageError(f"latency_frames must be one of {LATENCIES}")
        if self.fusion_order not in FUSION_ORDERS:
            raise UsageError(f"fusion order must be one of {FUSION_ORDERS}")
        get_preset(self.preset)

    @property
    def coop(self) -> bool:
        return variant_flags(self.variant)["coop"]

    @property
    def delay(self) -> int:
        return (self.latency_frames or 0) if self.coop else 0

    @property
    def run_name(self) -> str:
        lat = f"L{self.delay}" if self.coop else "L-"
        return f"{self.variant}_{self.fusion_order}_{lat}_{self.preset}_s{self.seed}"

    def key(self) -> dict:
        """Everything that affects results (the output directory does not)."""
        return {"variant": self.variant, "latency_frames": self.delay if self.coop else None,
                "fusion_order": self.fusion_order, "preset": self.preset, "seed": self.seed}


def model_config(spec: ExperimentSpec, cfg: ExperimentConfig):
    return replace(cfg.model, variant=spec.variant, fusion_order=spec.fusion_order)


def train_key(spec: ExperimentSpec, cfg: ExperimentConfig) -> str:
    return config_hash(model_config(spec, cfg), cfg.train, spec.preset, cfg.num_train_scenarios, cfg.train_steps)


def training_scenarios(preset: str, cfg: ExperimentConfig) -> list[Scenario]:
    """Seeded training scenes. Where the preset has an occluded object, every other
    scene leaves it out so a single-view model cannot learn its presence as a prior."""
    base = get_preset(preset)
    out = []
    for i in range(cfg.num_train_scenarios):
        sp = base if (i % 2 == 0 or not base.hidden_object) else replace(base, hidden_object=False)
        out.append(simulate(sp, derive_seed(cfg.train.seed, "train-scenario", preset, i) % 2**32))
    return out


def ensure_checkpoint(spec: ExperimentSpec, cfg: ExperimentConfig, out: Path, mode: str = "auto"):
    """Load the cached checkpoint for this training setup, training it if needed.

    mode: "auto" (train if missing), "train" (always retrain), "eval-only" (must exist).
    Returns (params, checkpoint path).
    """
    key = train_key(spec, cfg)
    ck = out / "checkpoints" / f"{key}.ckpt"
    if mode != "train" and ck.exists():
        params, meta = load_checkpoint(ck)
        if meta.get("train_key") != key:
            raise ConfigError(f"{ck} metadata does not match its name")
        return params, ck
    if mode == "eval-only":
        raise UsageError(f"--eval-only: no checkpoint at {ck}; train first")
    model = Model(model_config(spec, cfg))
    scns = training_scenarios(spec.preset, cfg)
    log.info("training %s (%s) on %d %s scenes", spec.variant, spec.fusion_order, len(scns), spec.preset)
    ck.parent.mkdir(parents=True, exist_ok=True)
    params, _ = train(model, scns, cfg.train, delay=0, max_steps=cfg.train_steps or None,
                      curve_path=ck.with_suffix(".curve.csv"), dump_dir=out / "diagnostics")
    meta = {"train_key": key, "variant": spec.variant, "fusion_order": spec.fusion_order, "preset": spec.preset,
            "config": config_dict(cfg)}
    save_checkpoint(ck, params, meta)
    return params, ck


def evaluation_scenario(spec: ExperimentSpec, out: Path) -> Scenario:
    scn = simulate(get_preset(spec.preset), spec.seed)
    save_scenario(scn, out / "scenarios" / f"{spec.preset}_seed{spec.seed}.json")
    return scn


def run_experiment(spec: ExperimentSpec, cfg: ExperimentConfig = DESK, mode: str = "auto",
                   scn: Optional[Scenario] = None) -> dict:
    """Train or load, run the sequence once with the channel in the loop, score, write files."""
    out = Path(spec.out)
    params, ck = ensure_checkpoint(spec, cfg, out, mode)
    if scn is None:
        scn = evaluation_scenario(spec, out)
    model = Model(model_config(spec, cfg))
    seq = run_sequence(model, params, scn, spec.delay)
    dets = [r for _, _, r in seq]
    mAP, _ = compute_map(dets, scn.gt, cfg.eval)
    amota, amotp = compute_amota_amotp(dets, scn.gt, cfg.eval)
    row = {
        "variant": spec.variant,
        "latency_frames": spec.delay if spec.coop else None,
        "latency_ms": spec.delay * scn.spec.frame_ms if spec.coop else None,
        "fusion_order": spec.fusion_order,
        "preset": spec.preset,
        "seed": spec.seed,
        "mAP": mAP,
        "AMOTA": amota,
        "AMOTP": amotp,
        "config_hash": config_hash(cfg, spec.key()),
    }
    run_dir = out / "runs" / spec.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.csv").write_text(emit_report([row]))
    snap = {"spec": spec.key(), "config": config_dict(cfg), "checkpoint": ck.name, "config_hash": row["config_hash"]}
    (run_dir / "config.json").write_text(json.dumps(snap, sort_keys=True, indent=1) + "\n")
    (run_dir / "results.txt").write_text("".join(assemble_output(r, k, t) for k, t, r in seq))
    return row


# ----------------------------------------------------------------------------
# grids


def _order_key(row: dict):
    lat = row["latency_frames"]
    # point-cloud-first before image-first, as in the ablation table
    return (list(VARIANTS).index(row["variant"]), -1 if lat is None else lat,
            -FUSION_ORDERS.index(row["fusion_order"]), row["seed"])


def default_grid(preset: str = "intersection", seed: int = 0, fusion_order: str = IMAGE_FIRST,
                 out: str = "runs") -> list[ExperimentSpec]:
    """Single-view variants once, V2X variants at every latency: 12 specs."""
    specs = []
    for v, f in VARIANTS.items():
        for lat in (LATENCIES if f["coop"] else (None,)):
            specs.append(ExperimentSpec(v, lat, fusion_order, preset, seed, out))
    return specs


def fusion_grid(preset: str = "intersection", seed: int = 0, out: str = "runs") -> list[ExperimentSpec]:
    """Two-modality variants under both fusion orders."""
    return [ExperimentSpec(v, 0 if VARIANTS[v]["coop"] else None, order, preset, seed, out)
            for v in ("XET-V", "XET-V2X") for order in reversed(FUSION_ORDERS)]


def sweep(specs: list[ExperimentSpec], cfg: ExperimentConfig = DESK, mode: str = "auto",
          path: Optional[Path] = None) -> str:
    """Run every spec and return (and optionally write) one merged CSV ordered by (variant, latency)."""
    presets = {s.preset for s in specs}
    if len(presets) > 1:
        raise UsageError(f"a sweep needs one scenario preset, got {sorted(presets)}")
    scenes: dict[tuple, Scenario] = {}
    rows = []
    for s in specs:
        k = (s.preset, s.seed, s.out)
        if k not in scenes:
            scenes[k] = evaluation_scenario(s, Path(s.out))
        rows.append(run_experiment(s, cfg, mode, scenes[k]))
    text = emit_report(sorted(rows, key=_order_key))
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# ----------------------------------------------------------------------------
# payload accounting

PAYLOAD_FIELDS = ("preset", "agent", "modality", "raw", "feature", "instance")


def payload_rows(cfg: ExperimentConfig = DESK, presets=None, seed: int = 0) -> list[dict]:
    """Mean bytes per frame the cooperative agent would send at each level, per preset.

    Features are the agent's own encoder pyramids at the configured model
    size (their size does not depend on the weights); instance payloads count
    the frame's ground-truth objects as the detections sent.
    """
    model = Model(replace(cfg.model, variant="XET-V2X"))
    params = model.init_params(cfg.train.seed)
    rows = []
    for name in presets or sorted(PRESETS):
        scn = simulate(get_preset(name), seed)
        aid = scn.other_id
        roi = scn.worlds[0].agent(aid).rig.roi
        acc = {m: [0, 0, 0] for m in ("image", "lidar", "both")}
        for k, frame in enumerate(scn.frames[aid]):
            img, lid, _ = model.encode_view(params, frame, roi)
            for mod, feats, mods in (("image", [img], ("image",)), ("lidar", [lid], ("lidar",)),
                                     ("both", [img, lid], ("image", "lidar"))):
                reps = payload_account(frame, feats, scn.gt[k], cfg.payload, mods)
                for i, r in enumerate(reps):
                    acc[mod][i] += r.bytes_per_frame
        n = len(scn)
        for mod, (raw, feat, inst) in acc.items():
            rows.append({"preset": name, "agent": aid, "modality": mod, "raw": raw / n, "feature": feat / n,
                         "instance": inst / n})
    return rows


def emit_payload(rows: list[dict]) -> str:
    lines = [",".join(PAYLOAD_FIELDS)]
    for r in rows:
        lines.append(",".join([r["preset"], r["agent"], r["modality"]] + [f"{r[k]:.1f}" for k in PAYLOAD_FIELDS[3:]]))
    return "\n".join(lines) + "\n"
