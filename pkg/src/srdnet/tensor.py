"""Dense NCHW tensor creation, initialization and elementwise math.

Tensors are plain numpy arrays of shape (N, C, H, W), row-major with W
fastest-varying, float32 for all model math.  The gradient-check harness
runs the same code paths in float64, so every function here preserves the
dtype of its inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import RngStream

DTYPE = np.float32

# N*C*H*W must stay addressable with signed 64-bit indices.
_MAX_ELEMS = 2**62


def _check_shape(shape) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ValueError(f"expected a 4-tuple (N, C, H, W), got {shape!r}")
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    n = 1
    for s in shape:
        n *= s
        if n > _MAX_ELEMS:
            raise ValueError(f"tensor of shape {shape} exceeds the index range")
    return shape


def zeros(shape, dtype=DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def constant(shape, value: float, dtype=DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=dtype)


def uniform(shape, lo: float, hi: float, stream: RngStream, dtype=DTYPE) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"uniform bounds out of order: lo={lo} > hi={hi}")
    return stream.uniform(lo, hi, _check_shape(shape)).astype(dtype)


def normal(shape, mu: float, sigma: float, stream: RngStream, dtype=DTYPE) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"negative sigma: {sigma}")
    return stream.normal(mu, sigma, _check_shape(shape)).astype(dtype)


def create(shape, fill: str = "zeros", *, value: float = 0.0, lo: float = 0.0,
           hi: float = 1.0, mu: float = 0.0, sigma: float = 1.0,
           stream: RngStream | None = None, dtype=DTYPE) -> np.ndarray:
    """Create a tensor with one of the named fill modes.

    fill: "zeros" | "constant" | "uniform" | "normal".  Random fills draw
    from the given stream only.
    """
    if fill == "zeros":
        return zeros(shape, dtype)
    if fill == "constant":
        return constant(shape, value, dtype)
    if fill == "uniform":
        if stream is None:
            raise ValueError("uniform fill requires a stream")
        return uniform(shape, lo, hi, stream, dtype)
    if fill == "normal":
        if stream is None:
            raise ValueError("normal fill requires a stream")
        return normal(shape, mu, sigma, stream, dtype)
    raise ValueError(f"unknown fill mode {fill!r}")


def he_init(shape, stream: RngStream, dtype=DTYPE) -> np.ndarray:
    """He-normal initialization for a conv weight of shape (Cout, Cin, K, K).

    Std is sqrt(2 / fan_in) with fan_in = Cin * K * K.
    """
    cout, cin, kh, kw = _check_shape(shape)
    fan_in = cin * kh * kw
    if fan_in == 0:
        raise ValueError(f"zero fan-in for weight shape {shape}")
    std = math.sqrt(2.0 / fan_in)
    return normal(shape, 0.0, std, stream, dtype)


def _check_same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x + y


def sub(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x - y


def mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x * y


def scale(x: np.ndarray, a: float) -> np.ndarray:
    return x * x.dtype.type(a)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of relu: passes upstream where x > 0, zero elsewhere."""
    _check_same_shape(x, upstream)
    return np.where(x > 0, upstream, 0).astype(upstream.dtype)
