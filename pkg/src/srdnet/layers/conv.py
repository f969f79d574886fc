"""2-D convolution with stride, dilation and zero/replicate padding,
implemented as im2col + BLAS matmul, with hand-derived backward passes.

All spatial arithmetic is the standard one: with padding p, dilation d,
kernel K and stride s, the output extent is (H + 2p - d*(K-1) - 1)//s + 1.
The backward data pass is itself a convolution (zero-stuffed upstream,
flipped kernel), so every heavy operation goes through the same matmul.

Internally the window gather runs channels-last so the innermost copy is
contiguous; the public API stays NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# Row-chunk size for the im2col matmul; keeps the left operand in cache.
_GEMM_CHUNK = 16384


@dataclass(frozen=True)
class ConvSpec:
    """Declarative description of one convolution layer."""
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    pad_mode: str = "zero"          # "zero" | "replicate"
    padding: int | None = None      # None = "same" (stride 1, odd K)

    def resolved_padding(self) -> int:
        if self.padding is not None:
            return self.padding
        if self.kernel % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel, got K={self.kernel}")
        return self.dilation * (self.kernel - 1) // 2


def pad2d(x: np.ndarray, pad: int, mode: str = "zero") -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, widths)
    if mode == "replicate":
        return np.pad(x, widths, mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def unpad2d_adjoint(gpad: np.ndarray, pad: int, mode: str = "zero") -> np.ndarray:
    """Adjoint of pad2d: routes gradients of padded pixels back to sources."""
    if pad == 0:
        return gpad
    if mode == "zero":
        return gpad[:, :, pad:-pad, pad:-pad]
    if mode == "replicate":
        g = gpad.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
        g = np.ascontiguousarray(g[:, :, pad:-pad, :])
        g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
        g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
        return g[:, :, :, pad:-pad]
    raise ValueError(f"unknown padding mode {mode!r}")


def _out_extent(padded: int, k: int, stride: int, dilation: int) -> int:
    span = dilation * (k - 1) + 1
    if padded < span:
        raise ValueError(f"input extent {padded} smaller than kernel span {span}")
    return (padded - span) // stride + 1


@njit(cache=True)
def _im2col_nhwc(xpl, k, stride, dil, cols):
    # xpl: (N, Hp, Wp, C) padded channels-last input
    # cols: (N, Ho*Wo, K*K*C), tap-major (ky, kx, c)
    n_b, hp, wp, c = xpl.shape
    ho = (hp - dil * (k - 1) - 1) // stride + 1
    wo = (wp - dil * (k - 1) - 1) // stride + 1
    for n in range(n_b):
        for i in range(ho):
            for j in range(wo):
                dst = cols[n, i * wo + j]
                idx = 0
                for ky in range(k):
                    row = xpl[n, i * stride + ky * dil]
                    for kx in range(k):
                        src = row[j * stride + kx * dil]
                        for cc in range(c):
                            dst[idx] = src[cc]
                            idx += 1


def _to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _weights_tap_major(weights: np.ndarray) -> np.ndarray:
    """(Cout, Cin, K, K) -> (K*K*Cin, Cout), matching the im2col column order."""
    return np.ascontiguousarray(weights.transpose(2, 3, 1, 0).reshape(-1, weights.shape[0]))


def _pad_to_nhwc(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Pad an NCHW input and lay it out channels-last in one copy."""
    n, c, h, w = x.shape
    if pad == 0:
        return _to_nhwc(x)
    if mode == "zero":
        out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        out[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
        return out
    if mode == "replicate":
        return np.pad(_to_nhwc(x), ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def _cols_nhwc(xpl: np.ndarray, k: int, stride: int, dilation: int
               ) -> tuple[np.ndarray, int, int]:
    n, hp, wp, c = xpl.shape
    ho = _out_extent(hp, k, stride, dilation)
    wo = _out_extent(wp, k, stride, dilation)
    if k == 1 and stride == 1 and dilation == 1:
        return xpl.reshape(n * hp * wp, c), ho, wo
    cols = np.empty((n, ho * wo, k * k * c), dtype=xpl.dtype)
    _im2col_nhwc(xpl, k, stride, dilation, cols)
    return cols.reshape(n * ho * wo, -1), ho, wo


def im2col(xp: np.ndarray, k: int, stride: int = 1, dilation: int = 1
           ) -> tuple[np.ndarray, int, int]:
    """Sliding windows of a padded NCHW input as (N*Ho*Wo, K*K*C) rows."""
    return _cols_nhwc(_to_nhwc(xp), k, stride, dilation)


def _matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b, chunked over rows of `a` for better cache behavior."""
    m = a.shape[0]
    if m <= _GEMM_CHUNK:
        return a @ b
    out = np.empty((m, b.shape[1]), dtype=a.dtype)
    for lo in range(0, m, _GEMM_CHUNK):
        hi = min(lo + _GEMM_CHUNK, m)
        np.matmul(a[lo:hi], b, out=out[lo:hi])
    return out


def conv2d_forward(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
                   bias: np.ndarray | None = None) -> np.ndarray:
    """y(p0) = b + sum_n w(p_n) * x(p0 + d*p_n) over the K x K tap square."""
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ValueError(f"weight shape {weights.shape} does not match spec {spec}")
    pad = spec.resolved_padding()
    xpl = _pad_to_nhwc(x, pad, spec.pad_mode)
    cols, ho, wo = _cols_nhwc(xpl, spec.kernel, spec.stride, spec.dilation)
    y = _matmul_rows(cols, _weights_tap_major(weights))
    if bias is not None:
        y += bias.reshape(1, -1)
    y = y.reshape(n, ho, wo, spec.out_channels)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
                    upstream: np.ndarray, need_grad_x: bool = True
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Exact gradients (grad_x, grad_w, grad_b) of conv2d_forward."""
    n, c, h, w = x.shape
    pad = spec.resolved_padding()
    k, s, d = spec.kernel, spec.stride, spec.dilation
    xpl = _pad_to_nhwc(x, pad, spec.pad_mode)
    hp, wp = xpl.shape[1], xpl.shape[2]
    ho = _out_extent(hp, k, s, d)
    wo = _out_extent(wp, k, s, d)
    if upstream.shape != (n, spec.out_channels, ho, wo):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"{(n, spec.out_channels, ho, wo)}")

    dy2 = _to_nhwc(upstream).reshape(-1, spec.out_channels)
    grad_b = upstream.sum(axis=(0, 2, 3))

    cols, _, _ = _cols_nhwc(xpl, k, s, d)
    gw2 = cols.T @ dy2
    grad_w = np.ascontiguousarray(
        gw2.reshape(k, k, c, spec.out_channels).transpose(3, 2, 0, 1))

    if not need_grad_x:
        return None, grad_w, grad_b

    # Data gradient: zero-stuff upstream by the stride, pad by the kernel
    # span, and convolve with the flipped kernel at the same dilation.
    if s > 1:
        stuffed = np.zeros((n, spec.out_channels, (ho - 1) * s + 1, (wo - 1) * s + 1),
                           dtype=upstream.dtype)
        stuffed[:, :, ::s, ::s] = upstream
    else:
        stuffed = upstream
    span = d * (k - 1)
    up_pl = _pad_to_nhwc(stuffed, span, "zero")
    w_flip = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols_u, hu, wu = _cols_nhwc(up_pl, k, 1, d)
    gxp = _matmul_rows(cols_u, _weights_tap_major(w_flip))
    gxp = np.ascontiguousarray(gxp.reshape(n, hu, wu, c).transpose(0, 3, 1, 2))
    # hu == hp when the forward stride tiles the input exactly; crop or
    # zero-extend for remainders the stride skipped.
    gxp = gxp[:, :, :hp, :wp]
    if gxp.shape[2] < hp or gxp.shape[3] < wp:
        full = np.zeros((n, c, hp, wp), dtype=gxp.dtype)
        full[:, :, :gxp.shape[2], :gxp.shape[3]] = gxp
        gxp = full
    grad_x = unpad2d_adjoint(gxp, pad, spec.pad_mode)
    return grad_x, grad_w, grad_b
