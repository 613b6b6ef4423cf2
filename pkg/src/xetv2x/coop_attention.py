"""Cooperative BEV fusion.

Multi-scale deformable attention, V2X cross-attention over an ego and one
cooperative view with a binary validity mask, the two cascaded modality
layers with configurable order, and temporal self-attention against the
ego-motion-aligned previous BEV.

All forward functions return ``(out, cache)`` and have a ``*_backward``
partner that accumulates parameter gradients into a ``grads`` tree shaped
like the parameters and returns gradients for the differentiable inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .numerics import (
    DTYPE,
    ConfigError,
    bilinear_taps,
    glorot,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    scatter_rows,
    softmax,
    softmax_backward,
)
from .pointpillar import RoiBox

log = logging.getLogger(__name__)

IMAGE_FIRST = "image_first"
POINTCLOUD_FIRST = "pointcloud_first"
FUSION_ORDERS = (IMAGE_FIRST, POINTCLOUD_FIRST)


@dataclass
class BEVQuerySet:
    grid_h: int
    grid_w: int
    queries: np.ndarray  # (grid_h * grid_w, D), row-major (row ~ y, col ~ x)
    ref_points: np.ndarray  # (grid_h * grid_w, N_ref, 3), ego frame, meters

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        if self.queries.shape[0] != n or self.ref_points.shape[0] != n:
            raise ConfigError("query grid and arrays disagree")

    @property
    def embed_dim(self) -> int:
        return self.queries.shape[1]

    @property
    def n_ref(self) -> int:
        return self.ref_points.shape[1]

    def as_map(self) -> np.ndarray:
        """Queries as a (D, grid_h, grid_w) feature map."""
        return self.queries.T.reshape(self.embed_dim, self.grid_h, self.grid_w)


@dataclass
class ProjectedRef:
    coords: np.ndarray  # (N, R, 2) normalized to the target feature support
    valid: np.ndarray  # (N, R) bool


def make_ref_points(roi: RoiBox, grid_h: int, grid_w: int, plane_z: float = 0.8,
                    z_fracs=(0.25, 0.5, 0.75)) -> np.ndarray:
    """One anchor at ``plane_z`` plus vertical anchors at fractions of the ROI z-range."""
    xs = roi.x_min + (np.arange(grid_w) + 0.5) * (roi.x_max - roi.x_min) / grid_w
    ys = roi.y_min + (np.arange(grid_h) + 0.5) * (roi.y_max - roi.y_min) / grid_h
    zs = [plane_z] + [roi.z_min + f * (roi.z_max - roi.z_min) for f in z_fracs]
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    n = grid_h * grid_w
    out = np.empty((n, len(zs), 3), dtype=DTYPE)
    out[:, :, 0] = gx.reshape(n, 1)
    out[:, :, 1] = gy.reshape(n, 1)
    out[:, :, 2] = np.asarray(zs)[None, :]
    return out


def _apply(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:3, :3].T + T[:3, 3]


class BEVProjector:
    """Maps ego-frame points into a LiDAR BEV feature support (the agent's ROI)."""

    def __init__(self, roi: RoiBox, ego_to_agent: np.ndarray):
        self.roi = roi
        self.T = np.asarray(ego_to_agent, dtype=DTYPE)

    def __call__(self, pts: np.ndarray) -> ProjectedRef:
        p = _apply(self.T, pts)
        coords = self.roi.normalize_xy(p)
        valid = np.all((coords >= 0) & (coords <= 1), axis=-1)
        valid &= (p[..., 2] >= self.roi.z_min) & (p[..., 2] <= self.roi.z_max)
        return ProjectedRef(coords, valid)


class CameraProjector:
    """Maps ego-frame points into normalized image coordinates.

    The camera frame has x forward (depth), y left, z up. Intrinsics act on
    (y, z, 1) of the camera-frame point (orthographic camera).
    """

    def __init__(self, intrinsics: np.ndarray, ego_to_camera: np.ndarray, width: int, height: int,
                 max_depth: float):
        self.K = np.asarray(intrinsics, dtype=DTYPE)
        self.T = np.asarray(ego_to_camera, dtype=DTYPE)
        self.width = width
        self.height = height
        self.max_depth = max_depth

    def __call__(self, pts: np.ndarray) -> ProjectedRef:
        p = _apply(self.T, pts)
        depth = p[..., 0]
        hom = np.stack([p[..., 1], p[..., 2], np.ones_like(depth)], axis=-1) @ self.K.T
        coords = np.stack([hom[..., 0] / self.width, hom[..., 1] / self.height], axis=-1)
        valid = np.all((coords >= 0) & (coords <= 1), axis=-1) & (depth > 0) & (depth <= self.max_depth)
        return ProjectedRef(coords, valid)


# ----------------------------------------------------------------------------
# multi-scale deformable attention


def init_deform_attn(rng: np.random.Generator, embed_dim: int, feat_channels: int, heads: int, levels: int,
                     points: int, head_dim: Optional[int] = None, offset_init_std: float = 0.0) -> dict:
    """Weights for one deformable attention block.

    Shapes: value_proj (M, C, Dh), out_proj (M, Dh, D), offset_w (D, M, L, K, 2),
    offset_b (M, L, K, 2), attn_w (D, M, L, K), attn_b (M, L, K). Offsets are
    in units of cells of the sampled level.
    """
    dh = head_dim or max(1, embed_dim // heads)
    m, l, k = heads, levels, points
    theta = 2 * np.pi * np.arange(m) / m
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=-1)  # (M, 2)
    scale = (np.arange(k) + 1.0).reshape(1, 1, k, 1)
    offset_b = np.broadcast_to(ring[:, None, None, :] * scale, (m, l, k, 2)).astype(DTYPE).copy()
    return {
        "value_proj": glorot(rng, (m, feat_channels, dh), feat_channels, dh),
        "out_proj": glorot(rng, (m, dh, embed_dim), dh * m, embed_dim),
        "offset_w": rng.normal(0.0, offset_init_std, size=(embed_dim, m, l, k, 2)).astype(DTYPE),
        "offset_b": offset_b,
        "attn_w": rng.normal(0.0, offset_init_std, size=(embed_dim, m, l, k)).astype(DTYPE),
        "attn_b": np.zeros((m, l, k), dtype=DTYPE),
    }


def _maps(feats) -> list[np.ndarray]:
    return [f if isinstance(f, np.ndarray) else f.data for f in feats]


def msdeform_attn(query: np.ndarray, ref: np.ndarray, feats, w: dict):
    """Deformable attention of N queries over L feature levels.

    query: (N, D). ref: (N, L, 2) or (N, R, L, 2) normalized reference
    locations per level (offsets and weights depend on the query only and
    are shared across the R axis). feats: L maps of shape (C, H_l, W_l).
    Returns (N, D) or (N, R, D).
    """
    maps = _maps(feats)
    squeeze = ref.ndim == 3
    if squeeze:
        ref = ref[:, None]
    n, r = ref.shape[:2]
    d = query.shape[1]
    m, c, dh = w["value_proj"].shape
    _, l, k = w["attn_b"].shape
    if len(maps) != l or ref.shape[2] != l:
        raise ConfigError(f"deformable attention expects {l} levels, got {len(maps)} maps / {ref.shape[2]} refs")
    for li, F in enumerate(maps):
        if F.shape[0] != c:
            raise ConfigError(f"level {li} has {F.shape[0]} channels, weights expect {c}")
    off = (query @ w["offset_w"].reshape(d, -1)).reshape(n, m, l, k, 2) + w["offset_b"]
    logits = (query @ w["attn_w"].reshape(d, -1)).reshape(n, m, l * k) + w["attn_b"].reshape(m, l * k)
    A = softmax(logits, axis=-1).reshape(n, m, l, k)
    # all levels side by side in one flat value table per head
    hs = np.array([F.shape[1] for F in maps])
    ws = np.array([F.shape[2] for F in maps])
    sizes = hs * ws
    p_tot = int(sizes.sum())
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    Fcat = np.concatenate([F.reshape(c, -1) for F in maps], axis=1)  # (C, P)
    V = np.matmul(Fcat.T[None], w["value_proj"])  # (M, P, Dh)
    scale = np.stack([ws, hs], axis=-1).astype(DTYPE)  # (L, 2)
    loc = ref[:, :, None, :, None, :] + off[:, None] / scale[:, None, :]  # (N, R, M, L, K, 2)
    shp = (1, 1, 1, l, 1)
    head_off = (np.arange(m) * p_tot).reshape(1, 1, m, 1, 1)
    taps = bilinear_taps(loc, hs.reshape(shp), ws.reshape(shp), starts.reshape(shp) + head_off)
    # tap axis next to (L, K) so one batched matmul contracts all samples
    idx, wgt, dwx, dwy = (np.moveaxis(t, 0, 3) for t in taps)  # (N, R, M, 4, L, K)
    G = V.reshape(m * p_tot, dh)[idx].reshape(n * r * m, 4 * l * k, dh)
    cw = wgt * A[:, None, :, None]
    head = np.matmul(cw.reshape(n * r * m, 1, -1), G).reshape(n, r, m, dh)
    out = (head.reshape(n * r, m * dh) @ w["out_proj"].reshape(m * dh, d)).reshape(n, r, d)
    cache = (query, A, head, G, idx, wgt, cw, dwx, dwy, Fcat, sizes, hs, ws, scale, squeeze)
    return (out[:, 0] if squeeze else out), cache


def msdeform_attn_backward(dout: np.ndarray, cache, w: dict, g: dict):
    """Returns (dquery (N, D), dfeats list of (C, H, W), dref like ref)."""
    query, A, head, G, idx, wgt, cw, dwx, dwy, Fcat, sizes, hs, ws, scale, squeeze = cache
    if squeeze:
        dout = dout[:, None]
    n, r, d = dout.shape
    m, c, dh = w["value_proj"].shape
    _, l, k = w["attn_b"].shape
    p_tot = Fcat.shape[1]
    hr = head.reshape(n * r, m * dh)
    dr = dout.reshape(n * r, d)
    g["out_proj"] += (hr.T @ dr).reshape(m, dh, d)
    dhead = (dr @ w["out_proj"].reshape(m * dh, d).T).reshape(n * r * m, dh, 1)
    u = np.matmul(G, dhead).reshape(wgt.shape)  # value . dhead per tap
    dA = (wgt * u).sum(axis=(1, 3))
    dV = scatter_rows(idx, cw[..., None] * dhead.reshape(n, r, m, 1, 1, 1, dh), m * p_tot).reshape(m, p_tot, dh)
    gd = u * A[:, None, :, None]
    dlx = (gd * dwx).sum(axis=3) * ws.reshape(1, 1, 1, l, 1)
    dly = (gd * dwy).sum(axis=3) * hs.reshape(1, 1, 1, l, 1)
    dloc = np.stack([dlx, dly], axis=-1)  # (N, R, M, L, K, 2)
    doff = dloc.sum(axis=1) / scale[:, None, :]
    dref = dloc.sum(axis=(2, 4))
    g["value_proj"] += np.matmul(Fcat[None], dV)
    dF = w["value_proj"].transpose(1, 0, 2).reshape(c, m * dh) @ dV.transpose(0, 2, 1).reshape(m * dh, p_tot)
    dfeats = [blk.reshape(c, h_, w_) for blk, h_, w_ in zip(np.split(dF, np.cumsum(sizes)[:-1], axis=1), hs, ws)]
    dlogits = softmax_backward(dA.reshape(n, m, l * k), A.reshape(n, m, l * k)).reshape(n, -1)
    g["attn_w"] += (query.T @ dlogits).reshape(g["attn_w"].shape)
    g["attn_b"] += dlogits.sum(axis=0).reshape(m, l, k)
    dof = doff.reshape(n, -1)
    g["offset_w"] += (query.T @ dof).reshape(g["offset_w"].shape)
    g["offset_b"] += doff.sum(axis=0)
    dquery = dlogits @ w["attn_w"].reshape(d, -1).T + dof @ w["offset_w"].reshape(d, -1).T
    return dquery, dfeats, (dref[:, 0] if squeeze else dref)


# ----------------------------------------------------------------------------
# V2X cross-attention


def _level_refs(pr: ProjectedRef, levels: int) -> np.ndarray:
    return np.broadcast_to(pr.coords[:, :, None, :], pr.coords.shape[:2] + (levels, 2))


def v2x_gates(ego_valid: np.ndarray, other_valid: Optional[np.ndarray]):
    """Per-reference weights on the ego and other contributions.

    ego weight = valid_ego / (1 + M), other weight = M / (1 + M), M in {0, 1}.
    """
    mo = np.zeros(ego_valid.shape, dtype=DTYPE) if other_valid is None else other_valid.astype(DTYPE)
    return ego_valid.astype(DTYPE) / (1.0 + mo), mo / (1.0 + mo)


def v2x_aggregate(query: np.ndarray, ego_feats, ego_ref: Optional[ProjectedRef], other_feats,
                  other_ref: Optional[ProjectedRef], w_ego: dict, w_other: Optional[dict]):
    """Masked sum over reference points of ego and other deformable attention (no residual)."""
    n, d = query.shape
    have_ego = ego_feats is not None and ego_ref is not None
    have_other = other_feats is not None and other_ref is not None and w_other is not None
    if not have_ego and not have_other:
        raise ConfigError("v2x aggregation needs at least one view")
    ref_shape = (ego_ref if have_ego else other_ref).valid.shape
    ev = ego_ref.valid if have_ego else np.zeros(ref_shape, dtype=bool)
    ov = other_ref.valid if have_other else None
    ge, go = v2x_gates(ev, ov)
    out = np.zeros((n, d), dtype=DTYPE)
    ce = co = None
    if have_ego:
        E, ce = msdeform_attn(query, _level_refs(ego_ref, len(ego_feats)), ego_feats, w_ego)
        terms = ge[..., None] * E
        if have_other and ov.any():
            O, co = msdeform_attn(query, _level_refs(other_ref, len(other_feats)), other_feats, w_other)
            terms = terms + go[..., None] * O
        out = terms.sum(axis=1)
    elif ov.any():
        O, co = msdeform_attn(query, _level_refs(other_ref, len(other_feats)), other_feats, w_other)
        out = (go[..., None] * O).sum(axis=1)
    dead = ~np.any((ge > 0) | (go > 0), axis=1)
    if dead.any():
        log.debug("%d queries have no valid reference point; residual only", int(dead.sum()))
    return out, (ce, co, ge, go)


def v2x_aggregate_backward(dout: np.ndarray, cache, w_ego: dict, w_other: Optional[dict], g_ego: dict,
                           g_other: Optional[dict]):
    """Returns (dquery, dego_feats or None, dother_feats or None)."""
    ce, co, ge, go = cache
    dq = np.zeros_like(dout)
    de = do = None
    if ce is not None:
        dqe, de, _ = msdeform_attn_backward(ge[..., None] * dout[:, None, :], ce, w_ego, g_ego)
        dq += dqe
    if co is not None:
        dqo, do, _ = msdeform_attn_backward(go[..., None] * dout[:, None, :], co, w_other, g_other)
        dq += dqo
    return dq, de, do


def init_v2x_layer(rng: np.random.Generator, embed_dim: int, feat_channels: int, heads: int, levels: int,
                   points: int, with_other: bool = True, offset_init_std: float = 0.0) -> dict:
    p = {
        "norm": {"g": np.ones(embed_dim, dtype=DTYPE), "b": np.zeros(embed_dim, dtype=DTYPE)},
        "ego": init_deform_attn(rng, embed_dim, feat_channels, heads, levels, points, offset_init_std=offset_init_std),
    }
    if with_other:
        p["other"] = init_deform_attn(rng, embed_dim, feat_channels, heads, levels, points,
                                      offset_init_std=offset_init_std)
    return p


def v2x_layer(q: np.ndarray, ego_feats, ego_ref, other_feats, other_ref, params: dict):
    """Pre-norm residual wrapper: q + aggregate(LN(q))."""
    x, nc = layer_norm(q, params["norm"]["g"], params["norm"]["b"])
    agg, ac = v2x_aggregate(x, ego_feats, ego_ref, other_feats, other_ref, params["ego"], params.get("other"))
    return q + agg, (nc, ac)


def v2x_layer_backward(dout: np.ndarray, cache, params: dict, grads: dict):
    nc, ac = cache
    dx, de, do = v2x_aggregate_backward(dout, ac, params["ego"], params.get("other"), grads["ego"],
                                        grads.get("other"))
    dxn, dg, db = layer_norm_backward(dx, nc)
    grads["norm"]["g"] += dg
    grads["norm"]["b"] += db
    return dout + dxn, de, do


Projector = Callable[[np.ndarray], ProjectedRef]


def v2x_cross_attn(q: BEVQuerySet, ego_feats, other_feats, projector_ego: Optional[Projector],
                   projector_other: Optional[Projector], params: dict):
    """One V2X cross-attention layer on a BEV query set. Returns (BEVQuerySet, cache)."""
    ego_ref = projector_ego(q.ref_points) if (projector_ego is not None and ego_feats is not None) else None
    other_ref = (projector_other(q.ref_points)
                 if (projector_other is not None and other_feats is not None) else None)
    out, cache = v2x_layer(q.queries, ego_feats, ego_ref, other_feats, other_ref, params)
    return replace(q, queries=out), cache


# ----------------------------------------------------------------------------
# dual-layer fusion


@dataclass
class ViewInputs:
    """One view's modality pyramids and projectors; ``None`` marks an absent modality."""
    img: Optional[list] = None
    lidar: Optional[list] = None
    img_projector: Optional[Projector] = None
    lidar_projector: Optional[Projector] = None


def fusion_sequence(order: str) -> tuple[str, str]:
    if order == IMAGE_FIRST:
        return ("img", "lidar")
    if order == POINTCLOUD_FIRST:
        return ("lidar", "img")
    raise ConfigError(f"unknown fusion order {order!r}")


def dual_layer_fuse(q: BEVQuerySet, ego: ViewInputs, other: Optional[ViewInputs], order: str, params: dict):
    """Cascade the image and LiDAR V2X cross-attention layers in ``order``.

    A modality absent from both views skips its layer. Returns the final
    query set and a cache for :func:`dual_layer_fuse_backward`.
    """
    seq = fusion_sequence(order)
    present = [mod for mod in seq if getattr(ego, mod) is not None or (other is not None and getattr(other, mod) is not None)]
    if not present:
        raise ConfigError("both modalities absent")
    caches = []
    cur = q
    for mod in present:
        ef = getattr(ego, mod)
        of = getattr(other, mod) if other is not None else None
        ep = getattr(ego, f"{mod}_projector")
        op = getattr(other, f"{mod}_projector") if other is not None else None
        cur, c = v2x_cross_attn(cur, ef, of, ep, op, params[mod])
        caches.append((mod, c))
    return cur, caches


def dual_layer_fuse_backward(dout: np.ndarray, caches, params: dict, grads: dict):
    """Returns (dq, {"ego": {mod: dfeats}, "other": {mod: dfeats}})."""
    dfeats = {"ego": {}, "other": {}}
    for mod, c in reversed(caches):
        dout, de, do = v2x_layer_backward(dout, c, params[mod], grads[mod])
        dfeats["ego"][mod] = de
        dfeats["other"][mod] = do
    return dout, dfeats


# ----------------------------------------------------------------------------
# attention with per-query key sets


def init_attention(rng: np.random.Generator, dim: int) -> dict:
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"w{name}"] = glorot(rng, (dim, dim), dim, dim)
        p[f"b{name}"] = np.zeros(dim, dtype=DTYPE)
    return p


def local_attention(xq: np.ndarray, kv: np.ndarray, mask: np.ndarray, w: dict, heads: int):
    """Multi-head attention where query n attends over its own key set kv[n].

    xq: (N, D); kv: (N, S, D); mask: (N, S) bool, at least one True per row.
    """
    n, d = xq.shape
    s = kv.shape[1]
    dh = d // heads
    Q = (xq @ w["wq"] + w["bq"]).reshape(n, heads, dh)
    K = (kv @ w["wk"] + w["bk"]).reshape(n, s, heads, dh)
    V = (kv @ w["wv"] + w["bv"]).reshape(n, s, heads, dh)
    logits = np.einsum("nmd,nsmd->nms", Q, K) / np.sqrt(dh)
    z = np.where(mask[:, None, :], logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)
    o = np.einsum("nms,nsmd->nmd", a, V).reshape(n, d)
    out = o @ w["wo"] + w["bo"]
    return out, (xq, kv, Q, K, V, a, o, heads)


def local_attention_backward(dout: np.ndarray, cache, w: dict, g: dict):
    xq, kv, Q, K, V, a, o, heads = cache
    n, d = xq.shape
    s = kv.shape[1]
    dh = d // heads
    do, dwo, dbo = linear_backward(dout, o, w["wo"])
    g["wo"] += dwo
    g["bo"] += dbo
    do = do.reshape(n, heads, dh)
    da = np.einsum("nmd,nsmd->nms", do, V)
    dV = np.einsum("nms,nmd->nsmd", a, do).reshape(n, s, d)
    dlog = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dQ = np.einsum("nms,nsmd->nmd", dlog, K).reshape(n, d)
    dK = np.einsum("nms,nmd->nsmd", dlog, Q).reshape(n, s, d)
    dxq, dwq, dbq = linear_backward(dQ, xq, w["wq"])
    dkv1, dwk, dbk = linear_backward(dK, kv, w["wk"])
    dkv2, dwv, dbv = linear_backward(dV, kv, w["wv"])
    for name, val in (("wq", dwq), ("bq", dbq), ("wk", dwk), ("bk", dbk), ("wv", dwv), ("bv", dbv)):
        g[name] += val
    return dxq, dkv1 + dkv2


# ----------------------------------------------------------------------------
# temporal self-attention


def align_prev_bev(prev: np.ndarray, roi: RoiBox, grid_h: int, grid_w: int, prev_ego_to_world: np.ndarray,
                   cur_ego_to_world: np.ndarray):
    """Resample the previous BEV into the current ego frame (nearest cell, zero fill).

    Returns (aligned (N, D), valid (N,) bool).
    """
    xs = roi.x_min + (np.arange(grid_w) + 0.5) * (roi.x_max - roi.x_min) / grid_w
    ys = roi.y_min + (np.arange(grid_h) + 0.5) * (roi.y_max - roi.y_min) / grid_h
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=-1)
    T = np.linalg.inv(prev_ego_to_world) @ cur_ego_to_world
    p = _apply(T, pts)
    cw = (roi.x_max - roi.x_min) / grid_w
    ch = (roi.y_max - roi.y_min) / grid_h
    col = np.floor((p[:, 0] - roi.x_min) / cw + 1e-9).astype(np.int64)
    row = np.floor((p[:, 1] - roi.y_min) / ch + 1e-9).astype(np.int64)
    valid = (col >= 0) & (col < grid_w) & (row >= 0) & (row < grid_h)
    aligned = np.zeros_like(prev)
    aligned[valid] = prev[row[valid] * grid_w + col[valid]]
    return aligned, valid


def init_temporal(rng: np.random.Generator, dim: int) -> dict:
    return {
        "norm": {"g": np.ones(dim, dtype=DTYPE), "b": np.zeros(dim, dtype=DTYPE)},
        "attn": init_attention(rng, dim),
    }


def temporal_self_attn(q_now: BEVQuerySet, q_prev_aligned: Optional[np.ndarray], prev_valid: Optional[np.ndarray],
                       params: dict, heads: int):
    """Each query attends to itself and, when available, its aligned predecessor.

    Pre-norm residual: q + MHA(LN(q), {LN(q), LN(prev)}).
    """
    x = q_now.queries
    n = x.shape[0]
    xn, nc = layer_norm(x, params["norm"]["g"], params["norm"]["b"])
    if q_prev_aligned is None:
        kv = xn[:, None, :]
        mask = np.ones((n, 1), dtype=bool)
        pc = None
    else:
        pn, pc = layer_norm(q_prev_aligned, params["norm"]["g"], params["norm"]["b"])
        kv = np.stack([xn, pn], axis=1)
        mask = np.stack([np.ones(n, dtype=bool), prev_valid.astype(bool)], axis=1)
    out, ac = local_attention(xn, kv, mask, params["attn"], heads)
    return replace(q_now, queries=x + out), (nc, pc, ac)


def temporal_self_attn_backward(dout: np.ndarray, cache, params: dict, grads: dict):
    """Returns (dq_now, dq_prev or None)."""
    nc, pc, ac = cache
    dxq, dkv = local_attention_backward(dout, ac, params["attn"], grads["attn"])
    dxn = dxq + dkv[:, 0]
    dx, dg, db = layer_norm_backward(dxn, nc)
    grads["norm"]["g"] += dg
    grads["norm"]["b"] += db
    dprev = None
    if pc is not None:
        dprev, dg2, db2 = layer_norm_backward(dkv[:, 1], pc)
        grads["norm"]["g"] += dg2
        grads["norm"]["b"] += db2
    return dout + dx, dprev


# ----------------------------------------------------------------------------
# position-wise feed-forward block (pre-norm residual)


def init_ffn(rng: np.random.Generator, dim: int, hidden: int) -> dict:
    return {
        "norm": {"g": np.ones(dim, dtype=DTYPE), "b": np.zeros(dim, dtype=DTYPE)},
        "w1": glorot(rng, (dim, hidden), dim, hidden),
        "b1": np.zeros(hidden, dtype=DTYPE),
        "w2": glorot(rng, (hidden, dim), hidden, dim),
        "b2": np.zeros(dim, dtype=DTYPE),
    }


def ffn(x: np.ndarray, p: dict):
    xn, nc = layer_norm(x, p["norm"]["g"], p["norm"]["b"])
    h, _ = linear(xn, p["w1"], p["b1"])
    a, m = relu(h)
    y, _ = linear(a, p["w2"], p["b2"])
    return x + y, (nc, xn, a, m)


def ffn_backward(dout: np.ndarray, cache, p: dict, g: dict):
    nc, xn, a, m = cache
    da, dw2, db2 = linear_backward(dout, a, p["w2"])
    dh = relu_backward(da, m)
    dxn, dw1, db1 = linear_backward(dh, xn, p["w1"])
    dx, dg, db = layer_norm_backward(dxn, nc)
    g["w1"] += dw1
    g["b1"] += db1
    g["w2"] += dw2
    g["b2"] += db2
    g["norm"]["g"] += dg
    g["norm"]["b"] += db
    return dout + dx
