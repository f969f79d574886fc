"""Spatial rearrangement layers: pixel shuffle, 2x2 max pooling, nearest
upsampling/resizing, and the bilinear 2x upsampler used as the evaluation
baseline.  All backwards are exact adjoints of the forwards.
"""

from __future__ import annotations

import numpy as np


def pixel_shuffle(x: np.ndarray, r: int = 2) -> np.ndarray:
    """(N, C, H, W) -> (N, C/r^2, rH, rW); rearrangement only, no arithmetic."""
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * r, w * r))


def pixel_unshuffle(y: np.ndarray, r: int = 2) -> np.ndarray:
    """Exact inverse permutation of pixel_shuffle."""
    n, c, h, w = y.shape
    if h % r != 0 or w % r != 0:
        raise ValueError(f"spatial extents ({h}, {w}) not divisible by r={r}")
    x = y.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(n, c * r * r, h // r, w // r))


def pixel_shuffle_backward(upstream: np.ndarray, r: int = 2) -> np.ndarray:
    # The adjoint of a permutation is its inverse.
    return pixel_unshuffle(upstream, r)


def pixel_unshuffle_backward(upstream: np.ndarray, r: int = 2) -> np.ndarray:
    return pixel_shuffle(upstream, r)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; returns (pooled, argmax) with argmax in 0..3 per
    window, ties resolved to the first index in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even extents, got ({h}, {w})")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return pooled, arg.astype(np.int8)


def maxpool2x2_backward(upstream: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Routes upstream to the stored argmax position of each window."""
    n, c, ho, wo = upstream.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=upstream.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.int64), upstream[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, ho * 2, wo * 2))


def nearest_upsample2x(x: np.ndarray) -> np.ndarray:
    """Each pixel replicated into a 2x2 block."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def nearest_upsample2x_backward(upstream: np.ndarray) -> np.ndarray:
    """Sums upstream over each replicated 2x2 block."""
    n, c, h, w = upstream.shape
    if h % 2 or w % 2:
        raise ValueError(f"upstream extents ({h}, {w}) are not even")
    return upstream.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize to an arbitrary size (floor index mapping)."""
    iy = _nearest_indices(x.shape[2], out_h)
    ix = _nearest_indices(x.shape[3], out_w)
    return np.ascontiguousarray(x[:, :, iy[:, None], ix[None, :]])


def nearest_resize_backward(upstream: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of nearest_resize: accumulate into each source pixel."""
    n, c, ho, wo = upstream.shape
    iy = _nearest_indices(in_h, ho)
    ix = _nearest_indices(in_w, wo)
    flat_idx = (iy[:, None] * in_w + ix[None, :]).ravel()
    up2 = upstream.reshape(n * c, ho * wo)
    out = np.empty((n * c, in_h * in_w), dtype=upstream.dtype)
    for row in range(n * c):
        out[row] = np.bincount(flat_idx, weights=up2[row], minlength=in_h * in_w)
    return out.reshape(n, c, in_h, in_w)


def bilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling with half-pixel center alignment (the
    evaluation baseline; no backward needed)."""
    n, c, h, w = x.shape
    # Output pixel centers at (i + 0.5)/2 - 0.5 in source coordinates.
    sy = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    sx = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0).astype(x.dtype)
    fx = np.clip(sx - x0, 0.0, 1.0).astype(x.dtype)
    top = x[:, :, y0[:, None], x0[None, :]] * (1 - fx)[None, None, None, :] \
        + x[:, :, y0[:, None], x1[None, :]] * fx[None, None, None, :]
    bot = x[:, :, y1[:, None], x0[None, :]] * (1 - fx)[None, None, None, :] \
        + x[:, :, y1[:, None], x1[None, :]] * fx[None, None, None, :]
    return top * (1 - fy)[None, None, :, None] + bot * fy[None, None, :, None]
