"""Training: bipartite assignment, focal + L1 losses, AdamW, checkpoints.

A training sample is a 5-frame window. The first four frames run forward
only (they build the temporal BEV state and the live tracks); the loss and
the backward pass cover the final frame.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .matching import gated_match, hungarian_match
from .model import FrameResult, Model
from .numerics import NumericError, derive_seed, flatten, make_rng, sigmoid, unflatten
from .scenario import Scenario
from .track_engine import BOX_DIM, DetectionRecord, TrackState, encode_box, lifecycle_update

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_iters: int = 20
    epochs: int = 2
    grad_clip_norm: float = 35.0
    seed: int = 0
    window: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    min_lr_ratio: float = 0.05
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cost_cls: float = 1.0
    cost_l1: float = 0.25
    loss_l1: float = 0.25
    birth_match_dist: float = 2.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.window < 1:
            raise ValueError("window must hold at least one frame")


FULL_TRAIN = TrainConfig(lr=2e-4, weight_decay=0.01, warmup_iters=500, epochs=10, grad_clip_norm=35.0)


# ----------------------------------------------------------------------------
# losses


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise binary focal loss; p is clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    return np.where(y == 1, pos, neg)


def sigmoid_focal(z: np.ndarray, y: np.ndarray, alpha: float, gamma: float):
    """Focal loss summed over all entries of logits z, and its gradient w.r.t. z."""
    p = np.clip(sigmoid(z), P_CLAMP, 1.0 - P_CLAMP)
    loss = focal_loss(p, y, alpha, gamma).sum()
    dpos = alpha * (1.0 - p) ** gamma * (gamma * p * np.log(p) - (1.0 - p))
    dneg = -(1.0 - alpha) * p**gamma * (gamma * (1.0 - p) * np.log(1.0 - p) - p)
    return float(loss), np.where(y == 1, dpos, dneg)


def l1_box_loss(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("box vectors differ in length")
    return float(np.mean(np.abs(pred - gt)))


def box_targets(gts: list[DetectionRecord], ego_to_world: np.ndarray, ref_m: np.ndarray) -> np.ndarray:
    """(Q, G, 8) regression targets of every GT relative to every query reference."""
    to_ego = np.linalg.inv(ego_to_world)
    ego_yaw = math.atan2(ego_to_world[1, 0], ego_to_world[0, 0])
    out = np.zeros((len(ref_m), len(gts), BOX_DIM))
    for j, g in enumerate(gts):
        c = to_ego[:3, :3] @ np.asarray(g.position) + to_ego[:3, 3]
        base = encode_box(c, g.dims, g.yaw - ego_yaw, (0.0, 0.0))
        out[:, j] = base
        out[:, j, 0] -= ref_m[:, 0]
        out[:, j, 1] -= ref_m[:, 1]
    return out


def match_cost(logits: np.ndarray, box: np.ndarray, gt_cls: np.ndarray, targets: np.ndarray,
               cfg: TrainConfig) -> np.ndarray:
    """(Q, G) cost: focal classification cost + per-coordinate L1 box cost."""
    p = np.clip(sigmoid(logits[:, gt_cls]), P_CLAMP, 1.0 - P_CLAMP)
    pos = focal_loss(p, 1, cfg.focal_alpha, cfg.focal_gamma)
    neg = focal_loss(p, 0, cfg.focal_alpha, cfg.focal_gamma)
    l1 = np.abs(box[:, None, :] - targets).sum(axis=-1)
    return cfg.cost_cls * (pos - neg) + cfg.cost_l1 * l1


def assign(res: FrameResult, gts: list[DetectionRecord], tracks: list[TrackState], track_gt: dict[int, int],
           cfg: TrainConfig) -> list[tuple[int, int]]:
    """Query -> GT pairs: track queries keep their identity's object, Hungarian on the rest."""
    out = res.out
    gid = {g.track_id: j for j, g in enumerate(gts)}
    pairs = []
    taken = set()
    for i, t in enumerate(tracks[: out.n_track]):
        j = gid.get(track_gt.get(t.track_id, -1))
        if j is not None and j not in taken:
            pairs.append((i, j))
            taken.add(j)
    free_g = [j for j in range(len(gts)) if j not in taken]
    if free_g:
        q = np.arange(out.n_track, len(out.logits))
        gt_cls = np.array([gts[j].class_id for j in free_g])
        tg = box_targets([gts[j] for j in free_g], res.ego_to_world, out.ref_m[q])
        cost = match_cost(out.logits[q], out.box[q], gt_cls, tg, cfg)
        pairs += [(int(q[a]), free_g[b]) for a, b in hungarian_match(cost)]
    return sorted(pairs)


def detection_loss(res: FrameResult, gts: list[DetectionRecord], pairs: list[tuple[int, int]], cfg: TrainConfig):
    """Returns (loss, dlogits, dbox, parts)."""
    out = res.out
    n, c = out.logits.shape
    y = np.zeros((n, c), dtype=np.int64)
    norm = max(1, len(gts))
    dbox = np.zeros_like(out.box)
    l1 = 0.0
    if pairs:
        qi = np.array([i for i, _ in pairs])
        gj = [j for _, j in pairs]
        y[qi, [gts[j].class_id for j in gj]] = 1
        tg = box_targets([gts[j] for j in gj], res.ego_to_world, out.ref_m[qi])
        tg = tg[np.arange(len(qi)), np.arange(len(qi))]
        diff = out.box[qi] - tg
        l1 = float(np.abs(diff).sum())
        dbox[qi] = cfg.loss_l1 * np.sign(diff) / norm
    focal, dz = sigmoid_focal(out.logits, y, cfg.focal_alpha, cfg.focal_gamma)
    loss = (focal + cfg.loss_l1 * l1) / norm
    return loss, dz / norm, dbox, {"focal": focal / norm, "l1": cfg.loss_l1 * l1 / norm}


# ----------------------------------------------------------------------------
# optimizer


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    if step < cfg.warmup_iters:
        return cfg.lr * (step + 1) / cfg.warmup_iters
    span = max(1, total - cfg.warmup_iters)
    frac = min(1.0, (step - cfg.warmup_iters) / span)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0


def adamw_init(params: dict) -> AdamWState:
    flat = flatten(params)
    return AdamWState({k: np.zeros_like(v) for k, v in flat.items()}, {k: np.zeros_like(v) for k, v in flat.items()})


def adamw_update(params: dict, grads: dict, state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay (matrices only) + bias-corrected Adam, in place."""
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    pf = flatten(params)
    for k, g in flatten(grads).items():
        p = pf[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if p.ndim >= 2:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ----------------------------------------------------------------------------
# windows and steps


def delivered(scn: Scenario, k: int, delay: int):
    """Cooperative frame available to the ego at index k under a fixed delay."""
    j = k - delay
    return scn.frames[scn.other_id][j] if j >= 0 else None


def associate_births(tracks_before: set[int], recs: list[DetectionRecord], gts: list[DetectionRecord],
                     track_gt: dict[int, int], max_dist: float) -> None:
    born = [r for r in recs if r.track_id is not None and r.track_id not in tracks_before]
    if not born or not gts:
        return
    d = np.array([[math.hypot(r.position[0] - g.position[0], r.position[1] - g.position[1]) for g in gts] for r in born])
    for i, j in gated_match(d, max_dist):
        track_gt[born[i].track_id] = gts[j].track_id


def run_context(model: Model, params: dict, scn: Scenario, ks: list[int], delay: int, cfg: TrainConfig):
    """Forward-only pass over context frames; returns (prev result, tracks, track->gt map)."""
    dcfg = model.cfg.decoder
    prev = None
    tracks: list[TrackState] = []
    next_id = 1
    track_gt: dict[int, int] = {}
    for k in ks:
        res = model.frame_forward(params, scn.frames["ego"][k], delivered(scn, k, delay), prev, tracks)
        recs = model.records(res, tracks)
        before = {t.track_id for t in tracks}
        tracks, next_id = lifecycle_update(tracks, recs, dcfg, res.out, k, next_id)
        associate_births(before, recs, scn.gt[k], track_gt, cfg.birth_match_dist)
        prev = res
    return prev, tracks, track_gt


@dataclass
class TrainState:
    params: dict
    opt: AdamWState
    step: int = 0
    total_steps: int = 1


def window_loss(model: Model, params: dict, scn: Scenario, k_end: int, delay: int, cfg: TrainConfig):
    """Loss and parameter gradients for the window ending at k_end."""
    ks = list(range(max(0, k_end - cfg.window + 1), k_end))
    prev, tracks, track_gt = run_context(model, params, scn, ks, delay, cfg)
    res = model.frame_forward(params, scn.frames["ego"][k_end], delivered(scn, k_end, delay), prev, tracks,
                              keep_cache=True)
    gts = scn.gt[k_end]
    pairs = assign(res, gts, tracks, track_gt, cfg)
    loss, dlogits, dbox, parts = detection_loss(res, gts, pairs, cfg)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at scenario seed {scn.seed} frame {k_end}: {parts}")
    grads = model.zero_grads(params)
    model.frame_backward(params, grads, res, dlogits, dbox)
    return loss, grads, parts


def train_step(state: TrainState, model: Model, scn: Scenario, k_end: int, cfg: TrainConfig, delay: int = 0,
               dump_dir: Optional[Path] = None):
    """One AdamW step on one window. Returns (params, loss, info)."""
    try:
        loss, grads, parts = window_loss(model, state.params, scn, k_end, delay, cfg)
    except NumericError as e:
        if dump_dir is not None:
            dump_diagnostic(dump_dir, scn, k_end, str(e))
        raise
    flat = flatten(grads)
    norm = clip_grads(flat, cfg.grad_clip_norm)
    lr = lr_at(state.step, state.total_steps, cfg)
    adamw_update(state.params, grads, state.opt, lr, cfg)
    state.step += 1
    return state.params, loss, {"lr": lr, "grad_norm": norm, **parts}


def dump_diagnostic(out_dir: Path, scn: Scenario, k: int, msg: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nonfinite_seed{scn.seed}_frame{k}.json"
    ego = scn.frames["ego"][k]
    doc = {
        "message": msg,
        "scenario_seed": scn.seed,
        "frame": k,
        "points": len(ego.cloud.points),
        "gt": [[g.track_id, g.class_id, list(g.position)] for g in scn.gt[k]],
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def training_windows(scenarios: list[Scenario], cfg: TrainConfig) -> list[tuple[int, int]]:
    """(scenario index, final frame) of every full window."""
    return [(i, k) for i, s in enumerate(scenarios) for k in range(cfg.window - 1, len(s))]


def train(model: Model, scenarios: list[Scenario], cfg: TrainConfig, delay: int = 0, params: Optional[dict] = None,
          curve_path=None, dump_dir=None, max_steps: Optional[int] = None):
    """Full training run; returns (params, loss curve rows)."""
    params = params if params is not None else model.init_params(cfg.seed)
    wins = training_windows(scenarios, cfg)
    total = len(wins) * cfg.epochs if max_steps is None else max_steps
    state = TrainState(params, adamw_init(params), 0, total)
    rng = make_rng(derive_seed(cfg.seed, "shuffle"))
    rows = []
    while state.step < total:
        for idx in rng.permutation(len(wins)):
            if state.step >= total:
                break
            si, k = wins[idx]
            _, loss, info = train_step(state, model, scenarios[si], k, cfg, delay, dump_dir)
            rows.append({"step": state.step, "loss": loss, **info})
            if state.step % 50 == 0:
                log.info("step %d loss %.4f focal %.4f l1 %.4f", state.step, loss, info["focal"], info["l1"])
    if curve_path is not None:
        write_curve(curve_path, rows)
    return state.params, rows


CURVE_FIELDS = ("step", "lr", "loss", "focal", "l1", "grad_norm")


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in CURVE_FIELDS[1:]])


# ----------------------------------------------------------------------------
# checkpoint: magic, version, metadata JSON, then a named float64 tensor table
#   b"XETV2XCK" | u32 version | u32 meta_len | meta (utf-8 JSON) | u32 n_tensors |
#   per tensor: u16 name_len | name | u8 ndim | u32 * ndim shape | little-endian f64 data

CKPT_MAGIC = b"XETV2XCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, meta: Optional[dict] = None) -> None:
    flat = flatten(params)
    m = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(m)), m, struct.pack("<I", len(flat))]
    for name, arr in flat.items():
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    ver, mlen = struct.unpack_from("<II", buf, 8)
    if ver != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ver}")
    pos = 16
    meta = json.loads(buf[pos : pos + mlen])
    pos += mlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    flat = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nl].decode()
        pos += nl
        (nd,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", buf, pos)
        pos += 4 * nd
        cnt = int(np.prod(shape)) if nd else 1
        flat[name] = np.frombuffer(buf, dtype="<f8", count=cnt, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * cnt
    return unflatten(flat), meta


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
