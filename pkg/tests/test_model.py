import numpy as np
import pytest

from xetv2x.model import VARIANTS, Model, ModelConfig
from xetv2x.numerics import ConfigError, grad_check
from xetv2x.scenario import ScenarioSpec, simulate
from xetv2x.track_engine import DecoderConfig

SPEC = ScenarioSpec(name="two", rate_hz=5.0, duration_s=0.4, num_objects=(2, 2))


def small(variant, **kw):
    return ModelConfig(variant=variant, bev_h=8, bev_w=8, embed_dim=16, ffn_dim=32,
                       decoder=DecoderConfig(num_layers=1, num_object_queries=9, embed_dim=16, ffn_dim=32), **kw)


def test_variant_table():
    assert len(VARIANTS) == 6
    with pytest.raises(ConfigError):
        ModelConfig(variant="RET-V")
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=16)  # decoder keeps 32
    p = Model(small("CET-V")).init_params(0)
    assert "pillar" not in p and set(p["fuse"]) == {"img"}
    assert "other" not in str(sorted(p["fuse"]["img"]))
    p = Model(small("LET-V2X")).init_params(0)
    assert "img_enc" not in p and set(p["fuse"]) == {"lidar"}


def test_single_view_ignores_other_frame():
    scn = simulate(SPEC, 0)
    m = Model(small("XET-V"))
    p = m.init_params(0)
    ego, other = scn.frames["ego"][0], scn.frames[scn.other_id][0]
    a = m.frame_forward(p, ego, other, None, [])
    b = m.frame_forward(p, ego, None, None, [])
    np.testing.assert_array_equal(a.out.logits, b.out.logits)


@pytest.mark.parametrize("variant,order", [("XET-V2X", "image_first"), ("XET-V2X", "pointcloud_first"),
                                           ("CET-V2X", "image_first")])
def test_end_to_end_gradient(variant, order):
    scn = simulate(SPEC, 1)
    m = Model(small(variant, fusion_order=order))
    p = m.init_params(2)
    rng = np.random.default_rng(7)
    ego, other = scn.frames["ego"][1], scn.frames[scn.other_id][1]
    prev = m.frame_forward(p, scn.frames["ego"][0], scn.frames[scn.other_id][0], None, [])
    res0 = m.frame_forward(p, ego, other, prev, [], keep_cache=True)
    wl = rng.normal(size=res0.out.logits.shape)
    wb = rng.normal(size=res0.out.box.shape)

    def leaf(tree, dotted):
        *head, key = dotted.split(".")
        for k in head:
            tree = tree[int(k)] if isinstance(tree, list) else tree[k]
        return tree, int(key) if isinstance(tree, list) else key

    def check(dotted):
        node, key = leaf(p, dotted)

        def f(x):
            old = node[key]
            node[key] = x
            res = m.frame_forward(p, ego, other, prev, [], keep_cache=True)
            g = m.zero_grads(p)
            m.frame_backward(p, g, res, wl, wb)
            node[key] = old
            val = float((res.out.logits * wl).sum() + (res.out.box * wb).sum())
            gn, gk = leaf(g, dotted)
            return val, gn[gk]

        coords = rng.choice(node[key].size, size=min(6, node[key].size), replace=False)
        return grad_check(f, node[key], coords=coords)

    names = ["bev_embed", "temporal.attn.wk", "img_enc.s0c0.w", "enc_ffn.w1", "fuse.img.other.value_proj",
             "fuse.img.ego.attn_w", "dec.query_embed"]
    if "lidar" in p["fuse"]:
        names += ["pillar.w", "fuse.lidar.other.out_proj", "fuse.lidar.norm.g"]
    errs = {n: check(n) for n in names}
    assert max(errs.values()) < 1e-4, errs
