import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xetv2x.numerics import ConfigError, grad_check, make_rng
from xetv2x.pointpillar import (
    FULL_VOXEL,
    ROI_V2XSEQ_EGO,
    FeatureMap,
    PointCloud,
    RoiBox,
    bev_backbone,
    bev_backbone_backward,
    init_bev_backbone,
    init_pillar_net,
    lidar_layout,
    pillar_encode,
    pillar_encode_backward,
    voxelize,
)

TOY = RoiBox(0.0, 25.6, -12.8, 12.8, -3.0, 5.0)


def cloud(pts):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[1] == 3:
        pts = np.concatenate([pts, np.full((len(pts), 1), 0.5)], axis=1)
    return PointCloud(pts)


def random_cloud(seed, n=300, roi=TOY):
    r = np.random.default_rng(seed)
    lo = np.array([roi.x_min, roi.y_min, roi.z_min]) - 2
    hi = np.array([roi.x_max, roi.y_max, roi.z_max]) + 2
    xyz = r.uniform(lo, hi, size=(n, 3))
    return PointCloud(np.concatenate([xyz, r.uniform(0, 1, size=(n, 1))], axis=1))


def test_full_grid_and_origin_cell():
    g = voxelize(cloud([[0.0, 0.0, 0.0], [200.0, 0.0, 0.0]]), ROI_V2XSEQ_EGO, FULL_VOXEL)
    assert (g.grid_h, g.grid_w) == (512, 512)
    # index = floor((coord - min) / voxel)
    assert g.coords.tolist() == [[int((0 + 51.2) // 0.2), int((0 + 51.2) // 0.2)]] == [[256, 256]]
    assert g.raw_counts.tolist() == [1]


def test_roi_must_divide():
    with pytest.raises(ConfigError):
        voxelize(cloud([[1, 1, 0]]), RoiBox(0, 10.1, 0, 10, -1, 1), (0.4, 0.4, 8))


@given(st.integers(0, 10_000))
def test_voxelize_is_a_partition(seed):
    c = random_cloud(seed)
    g = voxelize(c, TOY, (0.4, 0.4, 8.0), max_points=1000)
    inside = TOY.contains(c.points).sum()
    assert g.raw_counts.sum() == inside == g.counts.sum()
    for (r, col), pts in g.pillars.items():
        assert np.all(np.floor((pts[:, 0] - TOY.x_min) / 0.4) == col)
        assert np.all(np.floor((pts[:, 1] - TOY.y_min) / 0.4) == r)


@given(st.integers(0, 10_000), st.integers(-5, 5), st.integers(-5, 5))
def test_translation_by_whole_voxels_shifts_cells(seed, kx, ky):
    # points kept away from cell edges so float rounding cannot move them across
    r = np.random.default_rng(seed)
    cells = r.integers(0, 64, size=(200, 2))
    xy = (cells + r.uniform(0.2, 0.8, size=(200, 2))) * 0.4 + [TOY.x_min, TOY.y_min]
    c = cloud(np.concatenate([xy, r.uniform(-2, 4, size=(200, 1))], axis=1))
    g0 = voxelize(c, TOY)
    moved = c.points.copy()
    moved[:, 0] += kx * 0.4
    moved[:, 1] += ky * 0.4
    g1 = voxelize(PointCloud(moved), TOY)
    shifted = {(r + ky, col + kx) for r, col in g0.coords.tolist()}
    # cells that stay away from the border (rounding at the edge is allowed to differ)
    core = lambda cells: {(r, col) for r, col in cells if 2 <= r < g0.grid_h - 2 and 2 <= col < g0.grid_w - 2}
    assert core(shifted) == core(map(tuple, g1.coords.tolist()))


def test_point_cap_uses_farthest_first():
    pts = [[0.05 + 0.01 * i, 0.05, 0.0] for i in range(30)]
    g = voxelize(cloud(pts), TOY, max_points=4)
    kept = g.pillars[(32, 0)][:, 0]
    assert g.raw_counts[0] == 30 and g.counts[0] == 4
    assert np.isclose(kept.min(), 0.05) and np.isclose(kept.max(), 0.34)


def test_pillar_encode_empty_single_and_permutation(rng):
    p = init_pillar_net(make_rng(0), 8)
    empty, _ = pillar_encode(voxelize(cloud(np.zeros((0, 3))), TOY), p)
    assert not empty.data.any()
    pts = [[5.25, 0.1, 0.2], [5.3, 0.3, 1.0], [5.35, 0.2, -0.5]]
    one, _ = pillar_encode(voxelize(cloud(pts), TOY), p)
    cols = np.argwhere(np.abs(one.data).sum(axis=0) > 0)
    assert cols.tolist() in ([], [[32, 13]])
    perm, _ = pillar_encode(voxelize(cloud(pts[::-1]), TOY), p)
    np.testing.assert_array_equal(one.data, perm.data)


def test_pillar_encode_backward(rng):
    c = random_cloud(3, 400)
    g = voxelize(c, TOY, max_points=8)
    p = init_pillar_net(make_rng(1), 6)
    p["b"] = rng.normal(size=6)
    out, _ = pillar_encode(g, p)
    up = rng.normal(size=out.data.shape)

    def f(w):
        q = {"w": w, "b": p["b"]}
        o, cache = pillar_encode(g, q)
        grads = {"w": np.zeros_like(w), "b": np.zeros(6)}
        pillar_encode_backward(up, q, grads, cache)
        return float((o.data * up).sum()), grads["w"]

    assert grad_check(f, p["w"]) < 1e-6


def test_backbone_levels_and_channels():
    lay = lidar_layout(8, (1, 1), (8, 16), 16)
    p = init_bev_backbone(make_rng(0), lay)
    x = FeatureMap(0, 0.4, make_rng(1).normal(size=(8, 64, 64)))
    levels, _ = bev_backbone(x, p, lay)
    assert [lv.data.shape for lv in levels] == [(16, 32, 32), (16, 16, 16)]
    assert [lv.stride_m for lv in levels] == [0.8, 1.6]
    zero, _ = bev_backbone(FeatureMap(0, 0.4, np.zeros((8, 64, 64))), p, lay)
    assert all(not lv.data.any() for lv in zero)


def test_full_backbone_stride_arithmetic():
    lay = lidar_layout(64, (3, 5, 5), (64, 128, 256), 256)
    # stride 2 per stage on a 512 grid at 0.2 m
    sizes = [512 // (lay.stem[1] * 2**s) for s in range(3)]
    assert sizes == [256, 128, 64]
    assert [0.2 * 512 / s for s in sizes] == pytest.approx([0.4, 0.8, 1.6])


def test_backbone_too_small_input():
    lay = lidar_layout(4, (1, 1), (4, 4), 4)
    with pytest.raises(ConfigError):
        bev_backbone(FeatureMap(0, 0.4, np.zeros((4, 2, 2))), init_bev_backbone(make_rng(0), lay), lay)


def test_backbone_backward(rng):
    lay = lidar_layout(3, (1, 2), (4, 5), 3)
    p = init_bev_backbone(make_rng(0), lay)
    x = rng.normal(size=(3, 8, 8))
    levels, _ = bev_backbone(FeatureMap(0, 0.4, x), p, lay)
    ups = [rng.normal(size=lv.data.shape) for lv in levels]

    def f(z):
        lv, cache = bev_backbone(FeatureMap(0, 0.4, z), p, lay)
        grads = {k: {kk: np.zeros_like(vv) for kk, vv in v.items()} for k, v in p.items()}
        dz = bev_backbone_backward(ups, p, grads, lay, cache)
        return float(sum((a.data * u).sum() for a, u in zip(lv, ups))), dz

    assert grad_check(f, x) < 1e-6
