"""Strided conv stages with a top-down FPN, shared by the LiDAR and image encoders."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DTYPE,
    ConfigError,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    upsample2,
    upsample2_backward,
)


@dataclass(frozen=True)
class PyramidLayout:
    in_channels: int
    stage_blocks: tuple[int, ...]
    stage_channels: tuple[int, ...]
    out_channels: int
    # (kernel, stride, pad) of the first conv of stage 0; later stages use (3, 2, 1)
    stem: tuple[int, int, int] = (3, 2, 1)

    def __post_init__(self):
        if len(self.stage_blocks) != len(self.stage_channels) or len(self.stage_blocks) < 2:
            raise ConfigError("stage_blocks and stage_channels need equal length >= 2")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")

    def convs(self, stage: int) -> list[tuple[int, int, int, int, int]]:
        """(cin, cout, kernel, stride, pad) for each conv of a stage."""
        cin = self.in_channels if stage == 0 else self.stage_channels[stage - 1]
        cout = self.stage_channels[stage]
        k, s, p = self.stem if stage == 0 else (3, 2, 1)
        out = [(cin, cout, k, s, p)]
        out += [(cout, cout, 3, 1, 1)] * (self.stage_blocks[stage] - 1)
        return out

    def total_stride(self) -> int:
        return self.stem[1] * 2 ** (len(self.stage_blocks) - 1)


def init_pyramid(rng: np.random.Generator, layout: PyramidLayout) -> dict:
    params: dict = {}
    for s in range(len(layout.stage_blocks)):
        for j, (cin, cout, k, _, _) in enumerate(layout.convs(s)):
            fan_in = cin * k * k
            params[f"s{s}c{j}"] = {
                "w": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)).astype(DTYPE),
                "b": np.zeros(cout, dtype=DTYPE),
            }
        params[f"lat{s}"] = {
            "w": rng.normal(0.0, np.sqrt(1.0 / layout.stage_channels[s]), size=(layout.out_channels, layout.stage_channels[s], 1, 1)).astype(DTYPE),
            "b": np.zeros(layout.out_channels, dtype=DTYPE),
        }
    return params


def pyramid_forward(params: dict, layout: PyramidLayout, x: np.ndarray):
    _, h, w = x.shape
    ts = layout.total_stride()
    if h < ts or w < ts or h % ts or w % ts:
        raise ConfigError(f"input {h}x{w} not divisible by total stride {ts}")
    stage_caches = []
    stage_outs = []
    cur = x
    for s in range(len(layout.stage_blocks)):
        caches = []
        for j, (_, _, _, stride, pad) in enumerate(layout.convs(s)):
            p = params[f"s{s}c{j}"]
            y, cc = conv2d(cur, p["w"], p["b"], stride, pad)
            cur, mask = relu(y)
            caches.append((cc, mask))
        stage_caches.append(caches)
        stage_outs.append(cur)
    lats = []
    lat_caches = []
    for s, c in enumerate(stage_outs):
        p = params[f"lat{s}"]
        y, cc = conv2d(c, p["w"], p["b"])
        lats.append(y)
        lat_caches.append(cc)
    outs = [None] * len(lats)
    outs[-1] = lats[-1]
    for s in range(len(lats) - 2, -1, -1):
        outs[s] = lats[s] + upsample2(outs[s + 1])
    return outs, (stage_caches, lat_caches, [o.shape for o in outs])


def pyramid_backward(params: dict, grads: dict, layout: PyramidLayout, douts: list, cache) -> np.ndarray:
    stage_caches, lat_caches, shapes = cache
    n = len(douts)
    total = []
    for s in range(n):
        g = douts[s] if douts[s] is not None else np.zeros(shapes[s], dtype=DTYPE)
        total.append(g if s == 0 else g + upsample2_backward(total[s - 1]))
    dstage = []
    for s in range(n):
        dc, dw, db = conv2d_backward(total[s], lat_caches[s])
        grads[f"lat{s}"]["w"] += dw
        grads[f"lat{s}"]["b"] += db
        dstage.append(dc)
    dcur = None
    for s in range(n - 1, -1, -1):
        dcur = dstage[s] if dcur is None else dcur + dstage[s]
        convs = layout.convs(s)
        for j in range(len(convs) - 1, -1, -1):
            cc, mask = stage_caches[s][j]
            dy = relu_backward(dcur, mask)
            dcur, dw, db = conv2d_backward(dy, cc)
            grads[f"s{s}c{j}"]["w"] += dw
            grads[f"s{s}c{j}"]["b"] += db
    return dcur
