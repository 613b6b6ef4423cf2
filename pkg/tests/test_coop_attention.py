import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import _toy
from xetv2x.coop_attention import (
    IMAGE_FIRST,
    POINTCLOUD_FIRST,
    BEVQuerySet,
    ProjectedRef,
    ViewInputs,
    align_prev_bev,
    dual_layer_fuse,
    dual_layer_fuse_backward,
    ffn,
    ffn_backward,
    init_deform_attn,
    init_ffn,
    init_temporal,
    msdeform_attn,
    msdeform_attn_backward,
    temporal_self_attn,
    temporal_self_attn_backward,
    v2x_cross_attn,
    v2x_gates,
    v2x_layer,
    v2x_layer_backward,
)
from xetv2x.numerics import ConfigError, grad_check, make_rng


def deform_setup(rng, n=5, r=3):
    w = init_deform_attn(make_rng(0), 6, 3, 2, 2, 2, offset_init_std=0.3)
    w["attn_b"] = rng.normal(size=w["attn_b"].shape)
    feats = [rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 3, 3))]
    q = rng.normal(size=(n, 6))
    ref = rng.uniform(0.15, 0.85, size=(n, r, 2, 2))
    return w, feats, q, ref


def sample(arr, k=12, seed=0):
    return np.random.default_rng(seed).choice(arr.size, size=min(k, arr.size), replace=False)


def test_deform_output_shapes(rng):
    w, feats, q, ref = deform_setup(rng)
    out, _ = msdeform_attn(q, ref, feats, w)
    assert out.shape == (5, 3, 6)
    out2, _ = msdeform_attn(q, ref[:, 0], feats, w)
    np.testing.assert_allclose(out2, out[:, 0], atol=1e-14)
    with pytest.raises(ConfigError):
        msdeform_attn(q, ref, feats[:1], w)


def test_deform_attention_weights_normalized(rng):
    # constant field with samples kept in the interior: the softmax weights
    # sum to one so the output is the projected constant, whatever the query
    w = init_deform_attn(make_rng(1), 6, 3, 2, 2, 2, offset_init_std=0.0)
    w["attn_b"] = rng.normal(size=w["attn_b"].shape)
    vec = rng.normal(size=3)
    feats = [np.broadcast_to(vec[:, None, None], (3, 32, 32)).copy(), np.broadcast_to(vec[:, None, None], (3, 16, 16)).copy()]
    q = rng.normal(size=(4, 6))
    ref = np.full((4, 2, 2), 0.5)
    out, _ = msdeform_attn(q, ref, feats, w)
    head = np.einsum("c,mcd->md", vec, w["value_proj"])
    expect = np.einsum("md,mde->e", head, w["out_proj"])
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_deform_outside_support_is_zero(rng):
    w, feats, q, _ = deform_setup(rng)
    w["offset_b"][:] = 0.0
    w["offset_w"][:] = 0.0
    out, _ = msdeform_attn(q, np.full((5, 2, 2), 3.0), feats, w)
    assert not out.any()


def test_deform_linear_in_features(rng):
    w, feats, q, ref = deform_setup(rng)
    other = [rng.normal(size=f.shape) for f in feats]
    a, _ = msdeform_attn(q, ref, feats, w)
    b, _ = msdeform_attn(q, ref, other, w)
    ab, _ = msdeform_attn(q, ref, [2 * f - 3 * g for f, g in zip(feats, other)], w)
    np.testing.assert_allclose(ab, 2 * a - 3 * b, atol=1e-12)


def test_deform_backward_inputs(rng):
    w, feats, q, ref = deform_setup(rng)
    out, _ = msdeform_attn(q, ref, feats, w)
    up = rng.normal(size=out.shape)

    def run(qq, rr, ff):
        o, c = msdeform_attn(qq, rr, ff, w)
        dq, df, dr = msdeform_attn_backward(up, c, w, _toy.zeros_like_tree(w))
        return float((o * up).sum()), dq, df, dr

    assert grad_check(lambda z: (lambda r: (r[0], r[1]))(run(z, ref, feats)), q) < 1e-6
    assert grad_check(lambda z: (lambda r: (r[0], r[3]))(run(q, z, feats)), ref, coords=sample(ref, 20)) < 1e-5
    for li in range(2):
        def ff(z, li=li):
            fs = list(feats)
            fs[li] = z
            r = run(q, ref, fs)
            return r[0], r[2][li]
        assert grad_check(ff, feats[li], coords=sample(feats[li], 20)) < 1e-7


@pytest.mark.parametrize("name", ["value_proj", "out_proj", "offset_w", "offset_b", "attn_w", "attn_b"])
def test_deform_backward_params(rng, name):
    w, feats, q, ref = deform_setup(rng)
    out, _ = msdeform_attn(q, ref, feats, w)
    up = rng.normal(size=out.shape)

    def f(z):
        ww = dict(w, **{name: z})
        o, c = msdeform_attn(q, ref, feats, ww)
        g = _toy.zeros_like_tree(ww)
        msdeform_attn_backward(up, c, ww, g)
        return float((o * up).sum()), g[name]

    assert grad_check(f, w[name], coords=sample(w[name], 15)) < 1e-6


@given(st.lists(st.booleans(), min_size=1, max_size=8), st.lists(st.booleans(), min_size=1, max_size=8))
def test_gates(ev, ov):
    n = min(len(ev), len(ov))
    e, o = np.array(ev[:n]), np.array(ov[:n])
    ge, go = v2x_gates(e, o)
    np.testing.assert_array_equal(ge, np.where(o, 0.5, 1.0) * e)
    np.testing.assert_array_equal(go, np.where(o, 0.5, 0.0))
    ge0, go0 = v2x_gates(e, None)
    np.testing.assert_array_equal(ge0, e.astype(float))
    assert not go0.any()


def _refs(rng, n=16, r=3, valid=True):
    return ProjectedRef(rng.uniform(0.1, 0.9, size=(n, r, 2)), np.full((n, r), valid))


def test_mask_zero_is_bit_identical_to_ego_only(rng):
    p = _toy.layer_params(rng)
    q = rng.normal(size=(16, _toy.D))
    ef = _toy.pyramid(rng, _toy.LIDAR_SHAPES)
    of = _toy.pyramid(rng, _toy.LIDAR_SHAPES)
    er = _refs(rng)
    er.valid[::3, 1] = False
    solo, _ = v2x_layer(q, ef, er, None, None, p)
    masked, _ = v2x_layer(q, ef, er, of, _refs(rng, valid=False), p)
    np.testing.assert_array_equal(solo, masked)


def test_identical_views_match_ego_only(rng):
    p = _toy.layer_params(rng)
    p["other"] = {k: v.copy() for k, v in p["ego"].items()}
    q = rng.normal(size=(16, _toy.D))
    ef = _toy.pyramid(rng, _toy.LIDAR_SHAPES)
    er = _refs(rng)
    solo, _ = v2x_layer(q, ef, er, None, None, p)
    both, _ = v2x_layer(q, ef, er, [f.copy() for f in ef], ProjectedRef(er.coords.copy(), er.valid.copy()), p)
    np.testing.assert_allclose(both, solo, atol=1e-10)


def test_no_valid_reference_leaves_residual(rng):
    p = _toy.layer_params(rng)
    q = rng.normal(size=(16, _toy.D))
    out, _ = v2x_layer(q, _toy.pyramid(rng, _toy.LIDAR_SHAPES), _refs(rng, valid=False), None, None, p)
    np.testing.assert_array_equal(out, q)


def test_v2x_cross_attn_reference_validity(rng):
    ego, other = _toy.views(rng)
    q = _toy.queries(rng)
    er = ego.lidar_projector(q.ref_points)
    orf = other.lidar_projector(q.ref_points)
    assert er.valid.all()
    # shifted ROI: the first three meters of x fall outside the other support
    assert 0 < orf.valid.sum() < orf.valid.size
    ci = ego.img_projector(q.ref_points)
    co = other.img_projector(q.ref_points)
    assert ci.valid.all() and co.valid.all()
    # the other camera looks back along x, so lateral image coordinates mirror
    np.testing.assert_allclose(co.coords[..., 0], 1 - ci.coords[..., 0], atol=1e-12)
    out, _ = v2x_cross_attn(q, ego.lidar, other.lidar, ego.lidar_projector, other.lidar_projector,
                            _toy.layer_params(rng))
    assert isinstance(out, BEVQuerySet) and out.queries.shape == q.queries.shape


def test_v2x_layer_backward(rng):
    p = _toy.layer_params(rng)
    ego, other = _toy.views(rng)
    q = _toy.queries(rng)
    er = ego.lidar_projector(q.ref_points)
    orf = other.lidar_projector(q.ref_points)
    up = rng.normal(size=q.queries.shape)

    def run(x, ef, of):
        out, c = v2x_layer(x, ef, er, of, orf, p)
        g = _toy.zeros_like_tree(p)
        dx, de, do = v2x_layer_backward(up, c, p, g)
        return float((out * up).sum()), dx, de, do, g

    assert grad_check(lambda z: run(z, ego.lidar, other.lidar)[:2], q.queries, coords=sample(q.queries, 20)) < 1e-6
    f0 = ego.lidar[0]
    assert grad_check(lambda z: (lambda r: (r[0], r[2][0]))(run(q.queries, [z, ego.lidar[1]], other.lidar)),
                      f0, coords=sample(f0, 15)) < 1e-7
    o1 = other.lidar[1]
    assert grad_check(lambda z: (lambda r: (r[0], r[3][1]))(run(q.queries, ego.lidar, [other.lidar[0], z])),
                      o1, coords=sample(o1, 15)) < 1e-7
    for path in (("norm", "g"), ("ego", "offset_w"), ("other", "attn_w"), ("other", "value_proj")):
        arr = p[path[0]][path[1]]

        def fp(z, path=path):
            old = p[path[0]][path[1]]
            p[path[0]][path[1]] = z
            r = run(q.queries, ego.lidar, other.lidar)
            p[path[0]][path[1]] = old
            return r[0], r[4][path[0]][path[1]]

        assert grad_check(fp, arr, coords=sample(arr, 10)) < 1e-6, path


@pytest.mark.parametrize("order", [IMAGE_FIRST, POINTCLOUD_FIRST])
def test_dual_layer_fuse_backward(rng, order):
    params = _toy.fuse_params(rng)
    ego, other = _toy.views(rng)
    q = _toy.queries(rng)
    out, _ = dual_layer_fuse(q, ego, other, order, params)
    up = rng.normal(size=out.queries.shape)

    def run(x, img0=None):
        e = ego if img0 is None else ViewInputs([img0, ego.img[1]], ego.lidar, ego.img_projector, ego.lidar_projector)
        o, c = dual_layer_fuse(BEVQuerySet(4, 4, x, q.ref_points), e, other, order, params)
        g = _toy.zeros_like_tree(params)
        dq, df = dual_layer_fuse_backward(up, c, params, g)
        return float((o.queries * up).sum()), dq, df

    assert grad_check(lambda z: run(z)[:2], q.queries, coords=sample(q.queries, 20)) < 1e-6
    i0 = ego.img[0]
    assert grad_check(lambda z: (lambda r: (r[0], r[2]["ego"]["img"][0]))(run(q.queries, z)), i0,
                      coords=sample(i0, 15)) < 1e-7


def test_fusion_order_matters(rng):
    params = _toy.fuse_params(rng)
    ego, other = _toy.views(rng)
    q = _toy.queries(rng)
    a, ca = dual_layer_fuse(q, ego, other, IMAGE_FIRST, params)
    b, cb = dual_layer_fuse(q, ego, other, POINTCLOUD_FIRST, params)
    assert [m for m, _ in ca] == ["img", "lidar"] and [m for m, _ in cb] == ["lidar", "img"]
    assert np.abs(a.queries - b.queries).max() > 1e-6
    with pytest.raises(ConfigError):
        dual_layer_fuse(q, ego, other, "both", params)


def test_absent_modality_skips_layer(rng):
    params = _toy.fuse_params(rng)
    ego, _ = _toy.views(rng)
    q = _toy.queries(rng)
    lidar_only = ViewInputs(None, ego.lidar, None, ego.lidar_projector)
    out, caches = dual_layer_fuse(q, lidar_only, None, IMAGE_FIRST, params)
    assert [m for m, _ in caches] == ["lidar"]
    ref, _ = v2x_cross_attn(q, ego.lidar, None, ego.lidar_projector, None, params["lidar"])
    np.testing.assert_array_equal(out.queries, ref.queries)
    with pytest.raises(ConfigError):
        dual_layer_fuse(q, ViewInputs(), None, IMAGE_FIRST, params)


def _temporal(rng, dim=8):
    p = init_temporal(make_rng(5), dim)
    p["norm"]["g"] = 1 + 0.1 * rng.normal(size=dim)
    p["norm"]["b"] = 0.1 * rng.normal(size=dim)
    for k in ("bq", "bk", "bv", "bo"):
        p["attn"][k] = 0.1 * rng.normal(size=dim)
    return p


def test_temporal_cold_start_equals_duplicate_and_invalid_prev(rng):
    p = _temporal(rng)
    q = _toy.queries(rng)
    cold, _ = temporal_self_attn(q, None, None, p, heads=2)
    dup, _ = temporal_self_attn(q, q.queries.copy(), np.ones(16, bool), p, heads=2)
    masked, _ = temporal_self_attn(q, rng.normal(size=(16, 8)), np.zeros(16, bool), p, heads=2)
    np.testing.assert_allclose(dup.queries, cold.queries, atol=1e-12)
    np.testing.assert_allclose(masked.queries, cold.queries, atol=1e-12)


def test_temporal_backward(rng):
    p = _temporal(rng)
    q = _toy.queries(rng)
    prev = rng.normal(size=(16, 8))
    valid = np.arange(16) % 3 != 0
    up = rng.normal(size=(16, 8))

    def run(x, pv):
        o, c = temporal_self_attn(BEVQuerySet(4, 4, x, q.ref_points), pv, valid, p, heads=2)
        g = _toy.zeros_like_tree(p)
        dq, dp = temporal_self_attn_backward(up, c, p, g)
        return float((o.queries * up).sum()), dq, dp, g

    assert grad_check(lambda z: run(z, prev)[:2], q.queries) < 1e-6
    assert grad_check(lambda z: (lambda r: (r[0], r[2]))(run(q.queries, z)), prev) < 1e-6

    def fw(z):
        old = p["attn"]["wk"]
        p["attn"]["wk"] = z
        r = run(q.queries, prev)
        p["attn"]["wk"] = old
        return r[0], r[3]["attn"]["wk"]

    assert grad_check(fw, p["attn"]["wk"], coords=sample(p["attn"]["wk"], 20)) < 1e-6


def test_align_prev_bev_one_cell_shift():
    roi = _toy.ROI
    prev = np.arange(16 * 2, dtype=float).reshape(16, 2)
    same, valid = align_prev_bev(prev, roi, 4, 4, np.eye(4), np.eye(4))
    np.testing.assert_array_equal(same, prev)
    assert valid.all()
    # ego moved forward one cell (2 m): current column c sees previous column c + 1
    moved, valid = align_prev_bev(prev, roi, 4, 4, np.eye(4), _toy.pose(2.0, 0.0, 0.0))
    grid_prev = prev.reshape(4, 4, 2)
    grid = moved.reshape(4, 4, 2)
    np.testing.assert_array_equal(grid[:, :3], grid_prev[:, 1:])
    assert not grid[:, 3].any() and valid.reshape(4, 4)[:, 3].sum() == 0
    # the common world translation cancels
    again, _ = align_prev_bev(prev, roi, 4, 4, _toy.pose(5.0, 3.0, 0.0), _toy.pose(7.0, 3.0, 0.0))
    np.testing.assert_array_equal(again, moved)


def test_ffn_backward(rng):
    p = init_ffn(make_rng(2), 6, 10)
    p["b1"] = rng.normal(size=10)
    x = rng.normal(size=(5, 6))
    up = rng.normal(size=(5, 6))

    def f(z):
        y, c = ffn(z, p)
        return float((y * up).sum()), ffn_backward(up, c, p, _toy.zeros_like_tree(p))

    assert grad_check(f, x) < 1e-6
