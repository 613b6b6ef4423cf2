"""Point cloud -> pillars -> dense BEV pseudo-image -> multi-scale BEV pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, ConfigError, NumericError, linear, linear_backward, relu, relu_backward
from .pyramid import PyramidLayout, init_pyramid, pyramid_backward, pyramid_forward

POINT_FEATURES = 9


@dataclass(frozen=True)
class RoiBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max), (self.z_min, self.z_max)):
            if not lo < hi:
                raise ConfigError(f"invalid ROI extent [{lo}, {hi}]")

    def grid_shape(self, dx: float, dy: float) -> tuple[int, int]:
        """(grid_h, grid_w); raises if the ROI is not a whole number of voxels."""
        nx = (self.x_max - self.x_min) / dx
        ny = (self.y_max - self.y_min) / dy
        if abs(nx - round(nx)) > 1e-6 or abs(ny - round(ny)) > 1e-6:
            raise ConfigError(f"ROI not divisible by voxel ({nx:.6g} x {ny:.6g} cells)")
        return int(round(ny)), int(round(nx))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return (
            (pts[..., 0] >= self.x_min) & (pts[..., 0] < self.x_max)
            & (pts[..., 1] >= self.y_min) & (pts[..., 1] < self.y_max)
            & (pts[..., 2] >= self.z_min) & (pts[..., 2] < self.z_max)
        )

    def normalize_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=DTYPE)
        return np.stack(
            [(xy[..., 0] - self.x_min) / (self.x_max - self.x_min), (xy[..., 1] - self.y_min) / (self.y_max - self.y_min)],
            axis=-1,
        )


# ROI presets (agent-local meters)
ROI_V2XSEQ_EGO = RoiBox(-51.2, 51.2, -51.2, 51.2, -5.0, 3.0)
ROI_V2XSEQ_RSU = RoiBox(0.0, 102.4, -51.2, 51.2, -5.0, 3.0)
ROI_V2XSIM_EGO = RoiBox(-51.2, 51.2, -51.2, 51.2, -3.0, 5.0)
ROI_V2XSIM_OTHER = RoiBox(-51.2, 51.2, -51.2, 51.2, -3.0, 5.0)
FULL_VOXEL = (0.2, 0.2, 8.0)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    frame: str = "agent"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=DTYPE).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise NumericError("non-finite point coordinates")
        inten = self.points[:, 3]
        if np.any((inten < 0) | (inten > 1)):
            raise ValueError("intensity outside [0, 1]")


@dataclass
class PillarGrid:
    roi: RoiBox
    voxel: tuple[float, float, float]
    grid_h: int
    grid_w: int
    coords: np.ndarray  # (P, 2) row, col; sorted by flat index
    points: np.ndarray  # (P, cap, 4), zero padded
    counts: np.ndarray  # (P,) points kept
    raw_counts: np.ndarray  # (P,) points before truncation

    @property
    def pillars(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(r), int(c)): self.points[i, : self.counts[i]] for i, (r, c) in enumerate(self.coords)}

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class FeatureMap:
    level_id: int
    stride_m: float
    data: np.ndarray  # (C, H, W)
    name: str = ""

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _farthest_first(pts: np.ndarray, cap: int) -> np.ndarray:
    """Greedy max-min subset of ``cap`` rows, starting from the first row."""
    chosen = [0]
    d = np.linalg.norm(pts[:, :3] - pts[0, :3], axis=1)
    for _ in range(cap - 1):
        j = int(np.argmax(d))
        chosen.append(j)
        d = np.minimum(d, np.linalg.norm(pts[:, :3] - pts[j, :3], axis=1))
    return np.sort(np.asarray(chosen))


def voxelize(cloud: PointCloud, roi: RoiBox, voxel=(0.4, 0.4, 8.0), max_points: int = 32) -> PillarGrid:
    dx, dy, dz = voxel
    if min(dx, dy, dz) <= 0:
        raise ConfigError("voxel extents must be positive")
    gh, gw = roi.grid_shape(dx, dy)
    pts = cloud.points[roi.contains(cloud.points)]
    col = np.clip(np.floor((pts[:, 0] - roi.x_min) / dx).astype(np.int64), 0, gw - 1)
    row = np.clip(np.floor((pts[:, 1] - roi.y_min) / dy).astype(np.int64), 0, gh - 1)
    flat = row * gw + col
    # canonical order inside each pillar makes the result independent of input order
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    pts, flat = pts[order], flat[order]
    cells, starts, raw_counts = np.unique(flat, return_index=True, return_counts=True)
    p = len(cells)
    out = np.zeros((p, max_points, 4), dtype=DTYPE)
    counts = np.minimum(raw_counts, max_points)
    for i in range(p):
        sl = pts[starts[i] : starts[i] + raw_counts[i]]
        if len(sl) > max_points:
            sl = sl[_farthest_first(sl, max_points)]
        out[i, : len(sl)] = sl
    coords = np.stack([cells // gw, cells % gw], axis=1) if p else np.zeros((0, 2), dtype=np.int64)
    return PillarGrid(roi, tuple(voxel), gh, gw, coords, out, counts, raw_counts)


def pillar_point_features(grid: PillarGrid) -> tuple[np.ndarray, np.ndarray]:
    """Nine features per point plus a validity mask.

    (x, y, z) normalized to the ROI, intensity, offsets (m) to the pillar
    centroid, offsets (m) to the pillar's x/y center.
    """
    roi = grid.roi
    dx, dy, _ = grid.voxel
    pts = grid.points
    cap = pts.shape[1]
    mask = np.arange(cap)[None, :] < grid.counts[:, None]
    n = np.maximum(grid.counts, 1)[:, None]
    centroid = (pts[:, :, :3] * mask[..., None]).sum(axis=1) / n
    cx = roi.x_min + (grid.coords[:, 1] + 0.5) * dx
    cy = roi.y_min + (grid.coords[:, 0] + 0.5) * dy
    lo = np.array([roi.x_min, roi.y_min, roi.z_min])
    ext = np.array([roi.x_max - roi.x_min, roi.y_max - roi.y_min, roi.z_max - roi.z_min])
    feats = np.concatenate(
        [
            (pts[:, :, :3] - lo) / ext,
            pts[:, :, 3:4],
            pts[:, :, :3] - centroid[:, None, :],
            (pts[:, :, 0] - cx[:, None])[..., None],
            (pts[:, :, 1] - cy[:, None])[..., None],
        ],
        axis=-1,
    )
    return feats * mask[..., None], mask


def init_pillar_net(rng: np.random.Generator, mlp_width: int) -> dict:
    return {
        "w": rng.normal(0.0, np.sqrt(2.0 / POINT_FEATURES), size=(POINT_FEATURES, mlp_width)).astype(DTYPE),
        "b": np.zeros(mlp_width, dtype=DTYPE),
    }


def pillar_encode(grid: PillarGrid, params: dict, point_feats=None):
    """Shared MLP + per-pillar max pool, scattered to a dense (C, H, W) map."""
    c = params["w"].shape[1]
    dense = np.zeros((c, grid.grid_h, grid.grid_w), dtype=DTYPE)
    if len(grid) == 0:
        return FeatureMap(0, grid.voxel[0], dense, "pseudo"), None
    feats, mask = point_feats if point_feats is not None else pillar_point_features(grid)
    h, _ = linear(feats, params["w"], params["b"])
    a, rmask = relu(h)
    a = np.where(mask[..., None], a, -np.inf)
    arg = np.argmax(a, axis=1)  # (P, C)
    pooled = np.take_along_axis(a, arg[:, None, :], axis=1)[:, 0, :]
    dense[:, grid.coords[:, 0], grid.coords[:, 1]] = pooled.T
    return FeatureMap(0, grid.voxel[0], dense, "pseudo"), (feats, rmask, arg, grid.coords)


def pillar_encode_backward(ddense: np.ndarray, params: dict, grads: dict, cache) -> None:
    if cache is None:
        return
    feats, rmask, arg, coords = cache
    dpooled = ddense[:, coords[:, 0], coords[:, 1]].T  # (P, C)
    da = np.zeros(rmask.shape, dtype=DTYPE)
    np.put_along_axis(da, arg[:, None, :], dpooled[:, None, :], axis=1)
    dh = relu_backward(da, rmask)
    _, dw, db = linear_backward(dh, feats, params["w"])
    grads["w"] += dw
    grads["b"] += db


def lidar_layout(mlp_width: int, stage_blocks, stage_channels, out_channels: int) -> PyramidLayout:
    return PyramidLayout(mlp_width, tuple(stage_blocks), tuple(stage_channels), out_channels, stem=(3, 2, 1))


def init_bev_backbone(rng: np.random.Generator, layout: PyramidLayout) -> dict:
    return init_pyramid(rng, layout)


def bev_backbone(pseudo: FeatureMap, params: dict, layout: PyramidLayout):
    """Returns the FPN levels (finest first) and a cache for backward."""
    outs, cache = pyramid_forward(params, layout, pseudo.data)
    levels = []
    for s, o in enumerate(outs):
        lvl = pseudo.level_id + s + 1
        levels.append(FeatureMap(lvl, pseudo.stride_m * 2 ** (s + 1), o, f"P{lvl + 1}"))
    return levels, cache


def bev_backbone_backward(dlevels: list, params: dict, grads: dict, layout: PyramidLayout, cache) -> np.ndarray:
    return pyramid_backward(params, grads, layout, dlevels, cache)
