"""End-to-end network: per-view encoders, BEV fusion encoder, track decoder.

One frame runs: pillar + image encoders for the ego view and (for V2X
variants) the delivered cooperative view, temporal self-attention against
the previous BEV, dual-layer V2X cross-attention, a feed-forward block,
then the query decoder. ``frame_backward`` reverses the whole chain for the
supervised frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .coop_attention import (
    FUSION_ORDERS,
    IMAGE_FIRST,
    BEVProjector,
    BEVQuerySet,
    CameraProjector,
    ViewInputs,
    align_prev_bev,
    dual_layer_fuse,
    dual_layer_fuse_backward,
    ffn,
    ffn_backward,
    init_ffn,
    init_temporal,
    init_v2x_layer,
    make_ref_points,
    temporal_self_attn,
    temporal_self_attn_backward,
)
from .image_bev import image_encode, image_encode_backward, image_layout, init_image_encoder
from .numerics import ConfigError, derive_seed, make_rng, zeros_like_tree
from .pointpillar import (
    RoiBox,
    bev_backbone,
    bev_backbone_backward,
    init_bev_backbone,
    init_pillar_net,
    lidar_layout,
    pillar_encode,
    pillar_encode_backward,
    pillar_point_features,
    voxelize,
)
from .scenario import DESK_ROI, AgentFrame
from .track_engine import (
    DecoderConfig,
    DecoderOutput,
    TrackState,
    decoder_backward,
    init_decoder,
    records_from_output,
    run_decoder,
)

# viewpoints x modalities
VARIANTS = {
    "CET-V": dict(image=True, lidar=False, coop=False),
    "LET-V": dict(image=False, lidar=True, coop=False),
    "XET-V": dict(image=True, lidar=True, coop=False),
    "CET-V2X": dict(image=True, lidar=False, coop=True),
    "LET-V2X": dict(image=False, lidar=True, coop=True),
    "XET-V2X": dict(image=True, lidar=True, coop=True),
}


def variant_flags(variant: str) -> dict:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
    return VARIANTS[variant]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "XET-V2X"
    fusion_order: str = IMAGE_FIRST
    ego_roi: RoiBox = DESK_ROI
    other_roi: RoiBox = DESK_ROI
    voxel: tuple[float, float, float] = (0.4, 0.4, 8.0)
    max_points: int = 16
    pillar_width: int = 8
    lidar_blocks: tuple[int, ...] = (1, 1)
    lidar_channels: tuple[int, ...] = (8, 16)
    image_channels: tuple[int, ...] = (8, 16, 16)
    feat_channels: int = 16
    image_mean: float = 0.05
    image_std: float = 0.2
    bev_h: int = 16
    bev_w: int = 16
    embed_dim: int = 32
    heads: int = 2
    points: int = 2
    ref_plane_z: float = 0.8
    ref_z_fracs: tuple[float, ...] = (0.25, 0.5, 0.75)
    ffn_dim: int = 64
    temporal: bool = True
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        variant_flags(self.variant)
        if self.fusion_order not in FUSION_ORDERS:
            raise ConfigError(f"fusion order must be one of {FUSION_ORDERS}")
        if self.decoder.embed_dim != self.embed_dim:
            raise ConfigError("decoder embed_dim must match the BEV embed_dim")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        self.ego_roi.grid_shape(self.voxel[0], self.voxel[1])

    @property
    def flags(self) -> dict:
        return variant_flags(self.variant)


@dataclass
class FrameResult:
    out: DecoderOutput
    bev: np.ndarray  # (N, D) fused BEV queries, carried to the next frame
    ego_to_world: np.ndarray
    cache: object = None


class Model:
    """Holds the configuration and derived layouts; parameters live in a separate tree."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.lidar_layout = lidar_layout(cfg.pillar_width, cfg.lidar_blocks, cfg.lidar_channels, cfg.feat_channels)
        self.image_layout = image_layout(cfg.image_channels, cfg.feat_channels)
        self.ref_points = make_ref_points(cfg.ego_roi, cfg.bev_h, cfg.bev_w, cfg.ref_plane_z, cfg.ref_z_fracs)

    # ------------------------------------------------------------------
    def init_params(self, seed: int) -> dict:
        cfg = self.cfg
        f = cfg.flags
        rng = make_rng(derive_seed(seed, "init"))
        n = cfg.bev_h * cfg.bev_w
        p: dict = {}
        if f["lidar"]:
            p["pillar"] = init_pillar_net(rng, cfg.pillar_width)
            p["lidar_bb"] = init_bev_backbone(rng, self.lidar_layout)
        if f["image"]:
            p["img_enc"] = init_image_encoder(rng, self.image_layout)
        p["bev_embed"] = rng.normal(0.0, 1.0, size=(n, cfg.embed_dim))
        if cfg.temporal:
            p["temporal"] = init_temporal(rng, cfg.embed_dim)
        fuse = {}
        if f["image"]:
            fuse["img"] = init_v2x_layer(rng, cfg.embed_dim, cfg.feat_channels, cfg.heads,
                                         len(cfg.image_channels), cfg.points, with_other=f["coop"])
        if f["lidar"]:
            fuse["lidar"] = init_v2x_layer(rng, cfg.embed_dim, cfg.feat_channels, cfg.heads,
                                           len(cfg.lidar_channels), cfg.points, with_other=f["coop"])
        p["fuse"] = fuse
        p["enc_ffn"] = init_ffn(rng, cfg.embed_dim, cfg.ffn_dim)
        p["dec"] = init_decoder(rng, cfg.decoder)
        return p

    # ------------------------------------------------------------------
    def _pillars(self, frame: AgentFrame, roi: RoiBox):
        key = ("pillars", roi, self.cfg.voxel, self.cfg.max_points)
        hit = frame.cache.get(key)
        if hit is None:
            grid = voxelize(frame.cloud, roi, self.cfg.voxel, self.cfg.max_points)
            hit = (grid, pillar_point_features(grid))
            frame.cache[key] = hit
        return hit

    def encode_view(self, params: dict, frame: AgentFrame, roi: RoiBox):
        """Feature pyramids of one agent frame: (img levels or None, lidar levels or None, cache)."""
        f = self.cfg.flags
        img = lid = None
        ic = lc = None
        if f["image"]:
            data = (frame.image.data - self.cfg.image_mean) / self.cfg.image_std
            img, ic = image_encode(replace(frame.image, data=data), params["img_enc"], self.image_layout)
        if f["lidar"]:
            grid, feats = self._pillars(frame, roi)
            pseudo, pc = pillar_encode(grid, params["pillar"], feats)
            lid, bc = bev_backbone(pseudo, params["lidar_bb"], self.lidar_layout)
            lc = (pc, bc)
        return img, lid, (ic, lc)

    def encode_view_backward(self, params: dict, grads: dict, dimg, dlid, cache) -> None:
        ic, lc = cache
        if dimg is not None and ic is not None:
            image_encode_backward(dimg, params["img_enc"], grads["img_enc"], self.image_layout, ic)
        if dlid is not None and lc is not None:
            pc, bc = lc
            dpseudo = bev_backbone_backward(dlid, params["lidar_bb"], grads["lidar_bb"], self.lidar_layout, bc)
            pillar_encode_backward(dpseudo, params["pillar"], grads["pillar"], pc)

    def _view_inputs(self, img, lid, frame: AgentFrame, roi: RoiBox, ego_to_world: np.ndarray) -> ViewInputs:
        ego_to_agent = np.linalg.inv(frame.pose) @ ego_to_world
        ego_to_cam = np.linalg.inv(frame.image.extrinsics) @ ego_to_world
        im = frame.image
        return ViewInputs(
            img=img,
            lidar=lid,
            img_projector=CameraProjector(im.intrinsics, ego_to_cam, im.width, im.height, im.max_depth) if img else None,
            lidar_projector=BEVProjector(roi, ego_to_agent) if lid else None,
        )

    # ------------------------------------------------------------------
    def frame_forward(self, params: dict, ego: AgentFrame, other: Optional[AgentFrame],
                      prev: Optional[FrameResult], tracks: list[TrackState], keep_cache: bool = False,
                      use_history: bool = True) -> FrameResult:
        cfg = self.cfg
        ego_to_world = ego.pose
        if not cfg.flags["coop"]:
            other = None
        e_img, e_lid, e_cache = self.encode_view(params, ego, cfg.ego_roi)
        ego_in = self._view_inputs(e_img, e_lid, ego, cfg.ego_roi, ego_to_world)
        other_in = o_cache = None
        if other is not None:
            o_img, o_lid, o_cache = self.encode_view(params, other, cfg.other_roi)
            other_in = self._view_inputs(o_img, o_lid, other, cfg.other_roi, ego_to_world)
        q = BEVQuerySet(cfg.bev_h, cfg.bev_w, params["bev_embed"], self.ref_points)
        t_cache = None
        if cfg.temporal:
            if prev is not None and use_history:
                aligned, valid = align_prev_bev(prev.bev, cfg.ego_roi, cfg.bev_h, cfg.bev_w, prev.ego_to_world,
                                                ego_to_world)
                q, t_cache = temporal_self_attn(q, aligned, valid, params["temporal"], cfg.heads)
            else:
                q, t_cache = temporal_self_attn(q, None, None, params["temporal"], cfg.heads)
        q, f_cache = dual_layer_fuse(q, ego_in, other_in, cfg.fusion_order, params["fuse"])
        x, n_cache = ffn(q.queries, params["enc_ffn"])
        bev_map = x.T.reshape(cfg.embed_dim, cfg.bev_h, cfg.bev_w)
        out = run_decoder(params["dec"], cfg.decoder, bev_map, tracks, cfg.ego_roi, ego_to_world, use_history)
        cache = (e_cache, o_cache, t_cache, f_cache, n_cache) if keep_cache else None
        if not keep_cache:
            out.cache = None
        return FrameResult(out, x, ego_to_world, cache)

    def frame_backward(self, params: dict, grads: dict, res: FrameResult, dlogits: np.ndarray,
                       dbox: np.ndarray) -> None:
        cfg = self.cfg
        e_cache, o_cache, t_cache, f_cache, n_cache = res.cache
        dbev = decoder_backward(dlogits, dbox, params["dec"], grads["dec"], cfg.decoder, res.out.cache)
        dx = dbev.reshape(cfg.embed_dim, -1).T
        dq = ffn_backward(dx, n_cache, params["enc_ffn"], grads["enc_ffn"])
        dq, dfeats = dual_layer_fuse_backward(dq, f_cache, params["fuse"], grads["fuse"])
        if t_cache is not None:
            dq, _ = temporal_self_attn_backward(dq, t_cache, params["temporal"], grads["temporal"])
        grads["bev_embed"] += dq
        self.encode_view_backward(params, grads, dfeats["ego"].get("img"), dfeats["ego"].get("lidar"), e_cache)
        if o_cache is not None:
            self.encode_view_backward(params, grads, dfeats["other"].get("img"), dfeats["other"].get("lidar"),
                                      o_cache)

    def zero_grads(self, params: dict) -> dict:
        return zeros_like_tree(params)

    def records(self, res: FrameResult, tracks: list[TrackState], use_history: bool = True):
        return records_from_output(res.out, tracks if use_history else [], self.cfg.decoder, res.ego_to_world)
