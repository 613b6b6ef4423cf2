"""Dense float64 kernels with hand-written backward passes.

Every differentiable op comes as a forward/backward pair. Forward functions
return ``(out, cache)``; the matching ``*_backward`` takes the upstream
gradient and the cache. Arrays are plain ``np.ndarray`` of dtype float64;
trainable parameters live in nested ``dict`` trees (see :func:`flatten`).
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised when a value is non-finite or outside an op's domain."""


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


class IntegrityError(RuntimeError):
    """Raised when stateful bookkeeping (ids, queues) is violated."""


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


# ----------------------------------------------------------------------------
# RNG


def make_rng(seed: int, counter: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox); same (seed, counter) -> same stream."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1), counter=int(counter)))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Stable child seed from a parent seed and a tag path."""
    h = hashlib.sha256(str(int(seed)).encode())
    for t in tags:
        h.update(b"/" + str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(DTYPE)


# ----------------------------------------------------------------------------
# parameter trees


def flatten(tree: dict, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for k in sorted(tree):
        v = tree[k]
        name = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(flatten(v, name))
        else:
            out[name] = v
    return out


def unflatten(flat: dict[str, np.ndarray]) -> dict:
    tree: dict = {}
    for name, v in flat.items():
        node = tree
        parts = name.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return tree


def zeros_like_tree(tree: dict) -> dict:
    return {k: zeros_like_tree(v) if isinstance(v, dict) else np.zeros_like(v) for k, v in tree.items()}


def map_tree(fn: Callable[[np.ndarray], np.ndarray], tree: dict) -> dict:
    return {k: map_tree(fn, v) if isinstance(v, dict) else fn(v) for k, v in tree.items()}


# ----------------------------------------------------------------------------
# elementwise / small ops


def softmax(x: np.ndarray, axis: int | tuple[int, ...] = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.size == 0:
        raise NumericError("softmax of empty input")
    check_finite(x, "softmax input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int | tuple[int, ...] = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """y = x @ w + b over the last axis of x."""
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------------
# bilinear sampling (normalized coordinates, zero padding)


def bilinear_taps(loc: np.ndarray, h, w, start=0):
    """Four-corner taps for normalized locations (..., 2).

    ``h``, ``w`` and ``start`` (flat offset of the map) broadcast against
    ``loc[..., 0]``, so one call can address several maps laid end to end.
    Returns stacked (4, ...) arrays: flat index, weight, d weight / d x,
    d weight / d y (x, y in cell units). Taps outside the map, or for a
    location outside [0, 1]^2, get weight 0 and index ``start``.
    """
    if not np.all(np.isfinite(loc)):
        raise NumericError("non-finite sampling location")
    x = loc[..., 0] * w - 0.5
    y = loc[..., 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    inside = (loc[..., 0] >= 0) & (loc[..., 0] <= 1) & (loc[..., 1] >= 0) & (loc[..., 1] <= 1)
    gx, gy = 1 - fx, 1 - fy
    cx = np.stack([x0, x0 + 1, x0, x0 + 1])
    cy = np.stack([y0, y0, y0 + 1, y0 + 1])
    ok = inside & (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    idx = np.where(ok, start + cy * w + cx, start)
    wgt = np.stack([gx * gy, fx * gy, gx * fy, fx * fy]) * ok
    dwx = np.stack([-gy, gy, -fy, fy]) * ok
    dwy = np.stack([-gx, -fx, gx, fx]) * ok
    return idx, wgt, dwx, dwy


def bilinear_sample(feature: np.ndarray, loc: np.ndarray) -> np.ndarray:
    """Sample a (C, H, W) map at normalized locations (..., 2) -> (..., C).

    ``loc[..., 0]`` runs along W, ``loc[..., 1]`` along H; cell ``j`` has its
    center at ``(j + 0.5) / W``. Locations outside ``[0, 1]^2`` give zeros.
    """
    c, h, w = feature.shape
    loc = np.asarray(loc, dtype=DTYPE)
    flat = feature.reshape(c, h * w).T
    idx, wgt, _, _ = bilinear_taps(loc, h, w)
    return np.einsum("t...,t...c->...c", wgt, flat[idx])


def scatter_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """out[idx[i]] += values[i] over a (n_rows, D) zero array, accumulating repeats."""
    idx = idx.ravel()
    values = values.reshape(idx.size, -1)
    out = np.empty((n_rows, values.shape[1]), dtype=DTYPE)
    for d in range(values.shape[1]):
        out[:, d] = np.bincount(idx, weights=values[:, d], minlength=n_rows)
    return out


# ----------------------------------------------------------------------------
# 2D convolution on a single (C, H, W) map


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0):
    """x: (C, H, W); w: (Co, C, kh, kw). Returns (Co, Ho, Wo)."""
    co, ci, kh, kw = w.shape
    if x.shape[0] != ci:
        raise ConfigError(f"conv expects {ci} channels, got {x.shape[0]}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(ci * kh * kw, ho * wo)
    y = (w.reshape(co, -1) @ cols).reshape(co, ho, wo)
    if b is not None:
        y = y + b[:, None, None]
    return y, (cols, xp.shape, x.shape, w, stride, pad)


def conv2d_backward(dy: np.ndarray, cache):
    cols, xp_shape, x_shape, w, stride, pad = cache
    co, ci, kh, kw = w.shape
    _, ho, wo = dy.shape
    dy2 = dy.reshape(co, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    dcols = (w.reshape(co, -1).T @ dy2).reshape(ci, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return dxp, dw, db


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# ----------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f(x)`` returns ``(value, grad)``. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``coords`` optionally
    restricts the check to a subset of flat indices.
    """
    x = np.array(x, dtype=DTYPE, copy=True)
    val, grad = f(x)
    if not np.isfinite(val):
        raise NumericError("non-finite function value in grad_check")
    grad = np.asarray(grad, dtype=DTYPE).reshape(-1)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)[0]
        flat[i] = orig - eps
        fm = f(x)[0]
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        err = abs(grad[i] - num) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return float(worst)
