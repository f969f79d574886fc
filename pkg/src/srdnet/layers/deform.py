"""Deformable convolution: per-pixel learned tap offsets with bilinear
sampling, plus its backward pass through both the samples and the offsets.

Sampling semantics: taps read the input at fractional positions via
bilinear interpolation; any corner outside the image contributes zero
(zero-padding extended to the whole plane).  Offsets come as a field of
2*K*K channels per output pixel, ordered (dx, dy) per tap, taps row-major.

The gather/scatter inner loops are numba-compiled; loop order is fixed, so
results are bit-reproducible run to run.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .conv import ConvSpec, _matmul_rows


# The kernels run channels-last (NHWC) so the inner channel loop touches
# contiguous memory; wrappers transpose at the boundary.  Tap columns are
# ordered (tap, channel) to keep the writes contiguous too; the matching
# weight matrix permutation lives in the wrappers.

@njit(cache=True, fastmath=True)
def _gather(x, off, k, pad, cols):
    n_b, h, w, n_c = x.shape
    kk = k * k
    for n in range(n_b):
        for i in range(h):
            for j in range(w):
                p = i * w + j
                for t in range(kk):
                    py = i + t // k - pad + off[n, i, j, 2 * t + 1]
                    px = j + t % k - pad + off[n, i, j, 2 * t]
                    y0 = int(math.floor(py))
                    x0 = int(math.floor(px))
                    fy = py - y0
                    fx = px - x0
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    base = t * n_c
                    dst = cols[n, p]
                    if 0 <= y0 and y0 + 1 < h and 0 <= x0 and x0 + 1 < w:
                        s00 = x[n, y0, x0]
                        s01 = x[n, y0, x0 + 1]
                        s10 = x[n, y0 + 1, x0]
                        s11 = x[n, y0 + 1, x0 + 1]
                        for c in range(n_c):
                            dst[base + c] = (w00 * s00[c] + w01 * s01[c]
                                             + w10 * s10[c] + w11 * s11[c])
                    else:
                        in00 = 0 <= y0 < h and 0 <= x0 < w
                        in01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                        in10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                        in11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                        for c in range(n_c):
                            dst[base + c] = 0.0
                        if in00:
                            src = x[n, y0, x0]
                            for c in range(n_c):
                                dst[base + c] += w00 * src[c]
                        if in01:
                            src = x[n, y0, x0 + 1]
                            for c in range(n_c):
                                dst[base + c] += w01 * src[c]
                        if in10:
                            src = x[n, y0 + 1, x0]
                            for c in range(n_c):
                                dst[base + c] += w10 * src[c]
                        if in11:
                            src = x[n, y0 + 1, x0 + 1]
                            for c in range(n_c):
                                dst[base + c] += w11 * src[c]


@njit(cache=True, fastmath=True)
def _scatter(x, off, gcols, k, pad, gx, goff):
    n_b, h, w, n_c = x.shape
    kk = k * k
    for n in range(n_b):
        for i in range(h):
            for j in range(w):
                p = i * w + j
                for t in range(kk):
                    py = i + t // k - pad + off[n, i, j, 2 * t + 1]
                    px = j + t % k - pad + off[n, i, j, 2 * t]
                    y0 = int(math.floor(py))
                    x0 = int(math.floor(px))
                    fy = py - y0
                    fx = px - x0
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    base = t * n_c
                    g = gcols[n, p]
                    dpx = 0.0
                    dpy = 0.0
                    if 0 <= y0 and y0 + 1 < h and 0 <= x0 and x0 + 1 < w:
                        s00 = x[n, y0, x0]
                        s01 = x[n, y0, x0 + 1]
                        s10 = x[n, y0 + 1, x0]
                        s11 = x[n, y0 + 1, x0 + 1]
                        d00 = gx[n, y0, x0]
                        d01 = gx[n, y0, x0 + 1]
                        d10 = gx[n, y0 + 1, x0]
                        d11 = gx[n, y0 + 1, x0 + 1]
                        for c in range(n_c):
                            gc = g[base + c]
                            d00[c] += gc * w00
                            d01[c] += gc * w01
                            d10[c] += gc * w10
                            d11[c] += gc * w11
                            dpx += gc * ((1.0 - fy) * (s01[c] - s00[c])
                                         + fy * (s11[c] - s10[c]))
                            dpy += gc * ((1.0 - fx) * (s10[c] - s00[c])
                                         + fx * (s11[c] - s01[c]))
                        goff[n, i, j, 2 * t] = dpx
                        goff[n, i, j, 2 * t + 1] = dpy
                        continue
                    in00 = 0 <= y0 < h and 0 <= x0 < w
                    in01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                    in10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                    in11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                    if in00:
                        src = x[n, y0, x0]
                        dst = gx[n, y0, x0]
                        for c in range(n_c):
                            gc = g[base + c]
                            dst[c] += gc * w00
                            dpx -= gc * (1.0 - fy) * src[c]
                            dpy -= gc * (1.0 - fx) * src[c]
                    if in01:
                        src = x[n, y0, x0 + 1]
                        dst = gx[n, y0, x0 + 1]
                        for c in range(n_c):
                            gc = g[base + c]
                            dst[c] += gc * w01
                            dpx += gc * (1.0 - fy) * src[c]
                            dpy -= gc * fx * src[c]
                    if in10:
                        src = x[n, y0 + 1, x0]
                        dst = gx[n, y0 + 1, x0]
                        for c in range(n_c):
                            gc = g[base + c]
                            dst[c] += gc * w10
                            dpx -= gc * fy * src[c]
                            dpy += gc * (1.0 - fx) * src[c]
                    if in11:
                        src = x[n, y0 + 1, x0 + 1]
                        dst = gx[n, y0 + 1, x0 + 1]
                        for c in range(n_c):
                            gc = g[base + c]
                            dst[c] += gc * w11
                            dpx += gc * fy * src[c]
                            dpy += gc * fx * src[c]
                    goff[n, i, j, 2 * t] = dpx
                    goff[n, i, j, 2 * t + 1] = dpy


def _check_deform_args(x, spec: ConvSpec, weights, offsets):
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if spec.stride != 1 or spec.dilation != 1:
        raise ValueError("deformable conv supports stride 1, dilation 1 only")
    k = spec.kernel
    if weights.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ValueError(f"weight shape {weights.shape} does not match spec {spec}")
    if offsets.shape[1] != 2 * k * k:
        raise ValueError(
            f"offset field has {offsets.shape[1]} channels, expected {2 * k * k}")
    if offsets.shape[0] != n or offsets.shape[2:] != (h, w):
        raise ValueError(
            f"offset field shape {offsets.shape} does not match output ({n}, ., {h}, {w})")
    return spec.resolved_padding()


def _to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _weights_tap_major(weights: np.ndarray) -> np.ndarray:
    """(Cout, C, K, K) -> (Cout, K*K*C) matching the kernels' column order."""
    cout = weights.shape[0]
    return np.ascontiguousarray(weights.transpose(0, 2, 3, 1).reshape(cout, -1))


def deform_conv_forward(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
                        bias: np.ndarray | None, offsets: np.ndarray) -> np.ndarray:
    """y(p0) = b + sum_n w(p_n) * x(p0 + p_n + dp_n), bilinear taps."""
    pad = _check_deform_args(x, spec, weights, offsets)
    n, c, h, w = x.shape
    k = spec.kernel
    cols = np.empty((n, h * w, k * k * c), dtype=x.dtype)
    _gather(_to_nhwc(x), _to_nhwc(offsets), k, pad, cols)
    w2 = np.ascontiguousarray(_weights_tap_major(weights).T)
    y = _matmul_rows(cols.reshape(n * h * w, -1), w2)
    if bias is not None:
        y += bias.reshape(1, -1)
    return np.ascontiguousarray(
        y.reshape(n, h, w, spec.out_channels).transpose(0, 3, 1, 2))


def deform_conv_backward(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
                         offsets: np.ndarray, upstream: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_w, grad_b, grad_offsets)."""
    pad = _check_deform_args(x, spec, weights, offsets)
    n, c, h, w = x.shape
    k = spec.kernel
    if upstream.shape != (n, spec.out_channels, h, w):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output "
            f"{(n, spec.out_channels, h, w)}")

    dy2 = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(-1, spec.out_channels)
    grad_b = upstream.sum(axis=(0, 2, 3))

    x_l = _to_nhwc(x)
    off_l = _to_nhwc(offsets)
    cols = np.empty((n, h * w, k * k * c), dtype=x.dtype)
    _gather(x_l, off_l, k, pad, cols)
    gw2 = (cols.reshape(n * h * w, -1).T @ dy2).T
    grad_w = np.ascontiguousarray(
        gw2.reshape(spec.out_channels, k, k, c).transpose(0, 3, 1, 2))

    gcols = _matmul_rows(dy2, _weights_tap_major(weights)).reshape(n, h * w, k * k * c)
    gx_l = np.zeros_like(x_l)
    goff_l = np.empty_like(off_l)
    _scatter(x_l, off_l, gcols, k, pad, gx_l, goff_l)
    grad_x = np.ascontiguousarray(gx_l.transpose(0, 3, 1, 2))
    grad_off = np.ascontiguousarray(goff_l.transpose(0, 3, 1, 2))
    return grad_x, grad_w, grad_b, grad_off


def offset_channels(kernel: int) -> int:
    return 2 * kernel * kernel
