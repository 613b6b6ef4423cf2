"""Experiment configuration: dataclass presets, INI overrides, stable hashing.

Config file format (INI, read with :mod:`configparser`)::

    [experiment]
    preset = intersection      ; scenario preset
    num_train_scenarios = 4

    [model]
    bev_h = 16
    image_channels = 8, 16, 16

    [decoder]
    num_object_queries = 30

    [train]
    lr = 0.002

    [eval]
    recall_samples = 40

Keys are dataclass field names; tuples are comma separated; unknown
sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .evaluation import EvalConfig
from .model import ModelConfig
from .numerics import ConfigError
from .pointpillar import FULL_VOXEL, ROI_V2XSEQ_EGO, ROI_V2XSEQ_RSU, RoiBox
from .scenario import PayloadWidths
from .track_engine import DecoderConfig
from .train_assign import FULL_TRAIN, TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    payload: PayloadWidths = field(default_factory=PayloadWidths)
    preset: str = "intersection"
    num_train_scenarios: int = 8
    train_steps: int = 1000  # 0 means epochs * windows

    def __post_init__(self):
        if self.num_train_scenarios < 1:
            raise ConfigError("need at least one training scenario")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be >= 0")


DESK = ExperimentConfig()

# the published constants; too large to train here, kept for reference runs
FULL = ExperimentConfig(
    model=ModelConfig(
        ego_roi=ROI_V2XSEQ_EGO,
        other_roi=ROI_V2XSEQ_RSU,
        voxel=FULL_VOXEL,
        max_points=32,
        pillar_width=64,
        lidar_blocks=(3, 5, 5),
        lidar_channels=(64, 128, 256),
        image_channels=(256, 512, 1024, 2048),
        feat_channels=256,
        bev_h=200,
        bev_w=200,
        embed_dim=256,
        heads=8,
        points=4,
        ffn_dim=512,
        decoder=DecoderConfig(num_layers=6, num_object_queries=900, embed_dim=256, heads=8, points=4, ffn_dim=512),
    ),
    train=FULL_TRAIN,
    train_steps=0,
)

PRESETS = {"desk": DESK, "full": FULL}


def _to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_dict(v) for v in obj]
    return obj


def config_dict(cfg) -> dict:
    return _to_dict(cfg)


def config_hash(cfg, *extra) -> str:
    """First 16 hex digits of sha256 over the canonical JSON of cfg (and extras)."""
    doc = json.dumps([_to_dict(cfg), [_to_dict(e) for e in extra]], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _parse(value: str, default: Any, name: str):
    try:
        if isinstance(default, bool):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [s.strip() for s in value.split(",") if s.strip()]
            proto = default[0] if default else 0.0
            return tuple(_parse(s, proto, name) for s in items)
        if isinstance(default, RoiBox):
            vals = [float(s) for s in value.split(",")]
            return RoiBox(*vals)
        return value.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {value!r}") from e


def _override(obj, items: dict, section: str, **extra):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default) and not isinstance(default, RoiBox):
            raise ConfigError(f"[{section}] {key} is a section, not a value")
        changes[key] = _parse(raw, default, f"[{section}] {key}")
    changes.update(extra)
    return replace(obj, **changes) if changes else obj


SECTIONS = ("experiment", "model", "decoder", "train", "eval", "payload")


def apply_ini(cfg: ExperimentConfig, text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    get = lambda s: dict(cp.items(s)) if cp.has_section(s) else {}
    dec_items = get("decoder")
    if "embed_dim" in get("model") and "embed_dim" not in dec_items:
        # the decoder follows the BEV width unless set explicitly
        dec_items["embed_dim"] = get("model")["embed_dim"]
    dec = _override(cfg.model.decoder, dec_items, "decoder")
    model = _override(cfg.model, get("model"), "model", decoder=dec)
    out = replace(
        cfg,
        model=model,
        train=_override(cfg.train, get("train"), "train"),
        eval=_override(cfg.eval, get("eval"), "eval"),
        payload=_override(cfg.payload, get("payload"), "payload"),
    )
    return _override(out, get("experiment"), "experiment")


def load_config(path=None, base: str = "desk") -> ExperimentConfig:
    if base not in PRESETS:
        raise ConfigError(f"unknown config preset {base!r}")
    cfg = PRESETS[base]
    if path is not None:
        with open(path) as f:
            cfg = apply_ini(cfg, f.read())
    return cfg
