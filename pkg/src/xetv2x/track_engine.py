"""Query-based joint detection and tracking.

Object queries sit on fixed BEV anchors; track queries carry an identity
and the decoder embedding from the previous frame. Each decoder layer is
pre-norm self-attention among all queries, deformable cross-attention into
the fused BEV map, and a feed-forward block.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .coop_attention import (
    BEVQuerySet,
    ffn,
    ffn_backward,
    init_attention,
    init_deform_attn,
    init_ffn,
    local_attention,
    local_attention_backward,
    msdeform_attn,
    msdeform_attn_backward,
)
from .numerics import DTYPE, ConfigError, IntegrityError, glorot, layer_norm, layer_norm_backward, linear, linear_backward, sigmoid
from .pointpillar import RoiBox

CLASSES = ("car", "pedestrian", "motorcycle", "bicycle")
BOX_DIM = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
FOURIER_FREQS = 4


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass
class DetectionRecord:
    class_id: int
    position: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    score: float
    track_id: Optional[int] = None
    slot: int = field(default=-1, compare=False, repr=False)  # decoder query index, not serialized

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError("box dims must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score outside [0, 1]")
        self.yaw = wrap_angle(self.yaw)

    @property
    def label(self) -> str:
        return CLASSES[self.class_id]


@dataclass
class TrackState:
    track_id: int
    query_embed: np.ndarray
    last_score: float
    age: int
    born_at: int
    ref_world: np.ndarray  # (2,) last confirmed center, world frame


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 2
    num_object_queries: int = 30
    embed_dim: int = 32
    heads: int = 2
    points: int = 4
    ffn_dim: int = 64
    score_thresh_new: float = 0.4
    score_thresh_keep: float = 0.35
    max_age: int = 5
    nms_dist: float = 1.5
    num_classes: int = len(CLASSES)

    def __post_init__(self):
        if not 0.0 <= self.score_thresh_keep <= self.score_thresh_new <= 1.0:
            raise ConfigError("need 0 <= score_thresh_keep <= score_thresh_new <= 1")


def anchor_grid(n: int, roi: RoiBox) -> np.ndarray:
    """n anchors (normalized BEV coords) on the most square grid with >= n cells, row-major."""
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    ys = (np.arange(rows) + 0.5) / rows
    xs = (np.arange(cols) + 0.5) / cols
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)[:n].astype(DTYPE)


def fourier(ref: np.ndarray) -> np.ndarray:
    f = (2.0 ** np.arange(FOURIER_FREQS)) * np.pi
    ang = ref[..., :, None] * f  # (N, 2, F)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(ref.shape[0], -1)


def init_decoder(rng: np.random.Generator, cfg: DecoderConfig, prior: float = 0.01) -> dict:
    d = cfg.embed_dim
    layers = {}
    for i in range(cfg.num_layers):
        layers[str(i)] = {
            "sa_norm": {"g": np.ones(d), "b": np.zeros(d)},
            "sa": init_attention(rng, d),
            "ca_norm": {"g": np.ones(d), "b": np.zeros(d)},
            "ca": init_deform_attn(rng, d, d, cfg.heads, 1, cfg.points),
            "ffn": init_ffn(rng, d, cfg.ffn_dim),
        }
    pe = 4 * FOURIER_FREQS
    return {
        "query_embed": rng.normal(0.0, 0.5, size=(cfg.num_object_queries, d)),
        "pos": {"w": glorot(rng, (pe, d), pe, d), "b": np.zeros(d)},
        "layers": layers,
        "out_norm": {"g": np.ones(d), "b": np.zeros(d)},
        "cls": {"w": glorot(rng, (d, cfg.num_classes), d, cfg.num_classes) * 0.1,
                "b": np.full(cfg.num_classes, -math.log((1 - prior) / prior))},
        "box": {"w": glorot(rng, (d, BOX_DIM), d, BOX_DIM) * 0.1,
                "b": np.array([0.0, 0.0, 0.8, math.log(4.0), math.log(1.8), math.log(1.5), 0.0, 1.0])},
    }


def decoder_forward(params: dict, cfg: DecoderConfig, bev_map: np.ndarray, track_embed: np.ndarray,
                    track_ref: np.ndarray, anchors: np.ndarray):
    """Run the decoder on [track queries; object queries].

    bev_map: (D, gh, gw). track_embed: (T, D); track_ref / anchors: normalized
    BEV coordinates. Returns (logits (N, C), box (N, 8), normalized embeds (N, D), cache).
    """
    content = np.concatenate([track_embed, params["query_embed"]], axis=0)
    ref = np.concatenate([track_ref, anchors], axis=0)
    pe = fourier(ref)
    pos, _ = linear(pe, params["pos"]["w"], params["pos"]["b"])
    x = content + pos
    n = x.shape[0]
    caches = []
    for i in range(cfg.num_layers):
        p = params["layers"][str(i)]
        xn, c1 = layer_norm(x, p["sa_norm"]["g"], p["sa_norm"]["b"])
        kv = np.broadcast_to(xn[None], (n, n, xn.shape[1]))
        sa, c2 = local_attention(xn, kv, np.ones((n, n), dtype=bool), p["sa"], cfg.heads)
        x = x + sa
        xn2, c3 = layer_norm(x, p["ca_norm"]["g"], p["ca_norm"]["b"])
        ca, c4 = msdeform_attn(xn2, ref[:, None, :], [bev_map], p["ca"])
        x = x + ca
        x, c5 = ffn(x, p["ffn"])
        caches.append((c1, c2, c3, c4, c5))
    h, cn = layer_norm(x, params["out_norm"]["g"], params["out_norm"]["b"])
    logits, _ = linear(h, params["cls"]["w"], params["cls"]["b"])
    box, _ = linear(h, params["box"]["w"], params["box"]["b"])
    cache = (pe, caches, cn, h, content.shape[0] - params["query_embed"].shape[0])
    # normalized output becomes the next frame's track content, so it stays bounded over long tracks
    return logits, box, h, cache


def decoder_backward(dlogits: np.ndarray, dbox: np.ndarray, params: dict, grads: dict, cfg: DecoderConfig, cache):
    """Accumulates decoder grads; returns dbev_map (D, gh, gw)."""
    pe, caches, cn, h, n_track = cache
    dh1, dw, db = linear_backward(dlogits, h, params["cls"]["w"])
    grads["cls"]["w"] += dw
    grads["cls"]["b"] += db
    dh2, dw, db = linear_backward(dbox, h, params["box"]["w"])
    grads["box"]["w"] += dw
    grads["box"]["b"] += db
    dx, dg, dbb = layer_norm_backward(dh1 + dh2, cn)
    grads["out_norm"]["g"] += dg
    grads["out_norm"]["b"] += dbb
    dbev = None
    for i in range(cfg.num_layers - 1, -1, -1):
        p = params["layers"][str(i)]
        g = grads["layers"][str(i)]
        c1, c2, c3, c4, c5 = caches[i]
        dx = ffn_backward(dx, c5, p["ffn"], g["ffn"])
        dxn2, dmaps, _ = msdeform_attn_backward(dx, c4, p["ca"], g["ca"])
        dbev = dmaps[0] if dbev is None else dbev + dmaps[0]
        d, dg, dbb = layer_norm_backward(dxn2, c3)
        g["ca_norm"]["g"] += dg
        g["ca_norm"]["b"] += dbb
        dx = dx + d
        dxq, dkv = local_attention_backward(dx, c2, p["sa"], g["sa"])
        d, dg, dbb = layer_norm_backward(dxq + dkv.sum(axis=0), c1)
        g["sa_norm"]["g"] += dg
        g["sa_norm"]["b"] += dbb
        dx = dx + d
    _, dw, db = linear_backward(dx, pe, params["pos"]["w"])
    grads["pos"]["w"] += dw
    grads["pos"]["b"] += db
    grads["query_embed"] += dx[n_track:]
    return dbev


def decode_box(box: np.ndarray, ref_xy_m: np.ndarray):
    """Regression vector -> (center (3,), dims (3,), yaw) in the ego frame."""
    center = np.array([ref_xy_m[0] + box[0], ref_xy_m[1] + box[1], box[2]])
    dims = np.exp(np.clip(box[3:6], -5.0, 5.0))
    yaw = math.atan2(box[6], box[7])
    return center, dims, yaw


def encode_box(center, dims, yaw, ref_xy_m) -> np.ndarray:
    return np.array([center[0] - ref_xy_m[0], center[1] - ref_xy_m[1], center[2],
                     math.log(dims[0]), math.log(dims[1]), math.log(dims[2]), math.sin(yaw), math.cos(yaw)])


@dataclass
class DecoderOutput:
    logits: np.ndarray
    box: np.ndarray
    embeds: np.ndarray
    ref_m: np.ndarray  # (N, 2) reference centers in the ego frame, meters
    n_track: int
    cache: object = None

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)


def _to_norm(xy_ego: np.ndarray, roi: RoiBox) -> np.ndarray:
    return roi.normalize_xy(xy_ego)


def _from_norm(ref: np.ndarray, roi: RoiBox) -> np.ndarray:
    return np.stack([roi.x_min + ref[:, 0] * (roi.x_max - roi.x_min), roi.y_min + ref[:, 1] * (roi.y_max - roi.y_min)],
                    axis=-1)


def track_inputs(tracks: list[TrackState], world_to_ego: np.ndarray, embed_dim: int):
    if not tracks:
        return np.zeros((0, embed_dim)), np.zeros((0, 2))
    emb = np.stack([t.query_embed for t in tracks])
    w = np.stack([np.append(t.ref_world, [0.0, 1.0]) for t in tracks])  # (T, 4) homogeneous, z = 0
    e = w @ world_to_ego.T
    return emb, e[:, :2]


def run_decoder(params: dict, cfg: DecoderConfig, bev_map: np.ndarray, tracks: list[TrackState], roi: RoiBox,
                ego_to_world: np.ndarray, use_history: bool = True) -> DecoderOutput:
    if not use_history:
        tracks = []
    emb, tref_m = track_inputs(tracks, np.linalg.inv(ego_to_world), cfg.embed_dim)
    anchors = anchor_grid(cfg.num_object_queries, roi)
    tref = _to_norm(tref_m, roi) if len(tracks) else np.zeros((0, 2))
    logits, box, x, cache = decoder_forward(params, cfg, bev_map, emb, tref, anchors)
    ref_m = np.concatenate([tref_m, _from_norm(anchors, roi)], axis=0)
    return DecoderOutput(logits, box, x, ref_m, len(tracks), cache)


def decode(bev: BEVQuerySet, tracks: list[TrackState], cfg: DecoderConfig, weights: dict, roi: RoiBox,
           ego_to_world: np.ndarray, use_history: bool = True):
    """Decoder pass plus record extraction. Returns (records, raw outputs)."""
    out = run_decoder(weights, cfg, bev.as_map(), tracks, roi, ego_to_world, use_history)
    return records_from_output(out, tracks if use_history else [], cfg, ego_to_world), out


def records_from_output(out: DecoderOutput, tracks: list[TrackState], cfg: DecoderConfig,
                        ego_to_world: np.ndarray) -> list[DetectionRecord]:
    """Turn decoder outputs into records.

    Track queries above ``score_thresh_keep`` yield records with their
    identity; object queries above ``score_thresh_new`` yield provisional
    records (track_id None). A record within ``nms_dist`` of a higher-priority
    record is suppressed. Priority: track records before object records,
    older tracks first, then score. Suppressed tracks age out as misses.
    """
    scores = out.scores
    ego_yaw = math.atan2(ego_to_world[1, 0], ego_to_world[0, 0])
    cand = []
    for i in range(out.logits.shape[0]):
        is_track = i < out.n_track
        c = int(np.argmax(scores[i]))
        s = float(scores[i, c])
        thr = cfg.score_thresh_keep if is_track else cfg.score_thresh_new
        if s < thr:
            continue
        center, dims, yaw = decode_box(out.box[i], out.ref_m[i])
        pw = ego_to_world @ np.append(center, 1.0)
        rec = DetectionRecord(c, tuple(float(v) for v in pw[:3]), tuple(float(v) for v in dims), yaw + ego_yaw, s,
                              tracks[i].track_id if is_track else None, slot=i)
        born = tracks[i].born_at if is_track else 0
        cand.append((0 if is_track else 1, born, -s, i, rec))
    cand.sort(key=lambda t: t[:4])
    kept: list[DetectionRecord] = []
    for *_, rec in cand:
        if any(math.hypot(rec.position[0] - k.position[0], rec.position[1] - k.position[1]) < cfg.nms_dist for k in kept):
            continue
        kept.append(rec)
    return kept


def lifecycle_update(tracks: list[TrackState], detections: list[DetectionRecord], cfg: DecoderConfig,
                     out: Optional[DecoderOutput], frame: int, next_id: int):
    """Age, retire, confirm and spawn tracks. Assigns ids to new records in place.

    Returns (tracks, next_id).
    """
    ids = [t.track_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate track_id among live tracks")
    by_id = {d.track_id: d for d in detections if d.track_id is not None}
    new_tracks: list[TrackState] = []
    for i, t in enumerate(tracks):
        d = by_id.get(t.track_id)
        emb = out.embeds[i] if out is not None and i < out.n_track else t.query_embed
        if d is not None:
            new_tracks.append(TrackState(t.track_id, emb, d.score, 0, t.born_at, np.array(d.position[:2])))
        elif t.age + 1 <= cfg.max_age:
            score = float(out.scores[i].max()) if out is not None and i < out.n_track else t.last_score
            new_tracks.append(TrackState(t.track_id, emb, score, t.age + 1, t.born_at, t.ref_world))
    births = sorted((d for d in detections if d.track_id is None), key=lambda d: (-d.score, d.slot))
    for d in births:
        d.track_id = next_id
        emb = out.embeds[d.slot] if out is not None and d.slot >= 0 else np.zeros(cfg.embed_dim)
        new_tracks.append(TrackState(next_id, emb, d.score, 0, frame, np.array(d.position[:2])))
        next_id += 1
    return new_tracks, next_id


# ----------------------------------------------------------------------------
# results file: "#frame,<k>,<t>,<count>" header per frame, then one CSV record per line

RESULT_FIELDS = ("frame", "class", "x", "y", "z", "l", "w", "h", "yaw", "score", "track_id")


def assemble_output(detections: list[DetectionRecord], frame_index: int, timestamp: float) -> str:
    lines = [f"#frame,{frame_index},{timestamp!r},{len(detections)}"]
    for d in detections:
        vals = [str(frame_index), d.label, *map(repr, d.position), *map(repr, d.dims), repr(d.yaw), repr(d.score),
                "" if d.track_id is None else str(d.track_id)]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def write_results(path, frames: Iterable[tuple[int, float, list[DetectionRecord]]]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("# " + ",".join(RESULT_FIELDS) + "\n")
        for k, t, dets in frames:
            f.write(assemble_output(dets, k, t))


def parse_results(text: str) -> list[tuple[int, float, list[DetectionRecord]]]:
    frames = []
    for line in io.StringIO(text):
        line = line.rstrip("\n")
        if not line or line.startswith("# "):
            continue
        if line.startswith("#frame,"):
            _, k, t, _ = line.split(",")
            frames.append((int(k), float(t), []))
            continue
        parts = line.split(",")
        rec = DetectionRecord(CLASSES.index(parts[1]), tuple(float(v) for v in parts[2:5]),
                              tuple(float(v) for v in parts[5:8]), float(parts[8]), float(parts[9]),
                              int(parts[10]) if parts[10] else None)
        frames[-1][2].append(rec)
    return frames


def read_results(path) -> list[tuple[int, float, list[DetectionRecord]]]:
    with open(path) as f:
        return parse_results(f.read())
