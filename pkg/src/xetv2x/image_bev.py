"""Toy image encoder: patchify stem + strided conv stages + FPN."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import DTYPE, ConfigError, NumericError
from .pointpillar import FeatureMap
from .pyramid import PyramidLayout, init_pyramid, pyramid_backward, pyramid_forward

STEM_STRIDE = 4


@dataclass
class ImageFrame:
    data: np.ndarray  # (3, H, W)
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (4, 4) camera -> world
    max_depth: float = 50.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        if self.data.ndim != 3:
            raise ConfigError("image data must be (C, H, W)")
        self.intrinsics = np.asarray(self.intrinsics, dtype=DTYPE)
        self.extrinsics = np.asarray(self.extrinsics, dtype=DTYPE)
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ConfigError("intrinsics not invertible")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def normalize_image(img: ImageFrame, mean, std) -> ImageFrame:
    mean = np.asarray(mean, dtype=DTYPE).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=DTYPE).reshape(-1, 1, 1)
    if np.any(std == 0):
        raise NumericError("zero std in image normalization")
    return replace(img, data=(img.data - mean) / std)


def image_layout(stage_channels, out_channels: int, in_channels: int = 3) -> PyramidLayout:
    if not 2 <= len(stage_channels) <= 4:
        raise ConfigError("image pyramid needs 2-4 levels")
    return PyramidLayout(in_channels, (1,) * len(stage_channels), tuple(stage_channels), out_channels,
                         stem=(STEM_STRIDE, STEM_STRIDE, 0))


def init_image_encoder(rng: np.random.Generator, layout: PyramidLayout) -> dict:
    return init_pyramid(rng, layout)


def image_encode(img: ImageFrame, params: dict, layout: PyramidLayout):
    """Pyramid of feature maps (finest first, stride 4, 8, ...) and a backward cache."""
    if img.channels != layout.in_channels:
        raise ConfigError(f"expected {layout.in_channels} image channels, got {img.channels}")
    outs, cache = pyramid_forward(params, layout, img.data)
    levels = [FeatureMap(2 + s, float(STEM_STRIDE * 2**s), o, f"P{2 + s}") for s, o in enumerate(outs)]
    return levels, cache


def image_encode_backward(dlevels: list, params: dict, grads: dict, layout: PyramidLayout, cache) -> np.ndarray:
    return pyramid_backward(params, grads, layout, dlevels, cache)
