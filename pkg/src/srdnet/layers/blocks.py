"""Parameterized building blocks: convolution layers, conditioned feature
modulation (CFM), residual blocks (plain / atrous / CFM / deformable-CFM),
and the convolutional recurrent merge.

Each block owns named entries in a ParamStore.  forward returns the output
plus an opaque cache; backward consumes the cache, accumulates parameter
gradients into the store (+=), and returns input gradients.
"""

from __future__ import annotations

import numpy as np

from .. import tensor
from ..params import ParamStore
from ..rng import RngStream
from .conv import ConvSpec, conv2d_backward, conv2d_forward
from .deform import deform_conv_backward, deform_conv_forward, offset_channels


class Conv:
    """Convolution layer with bias, owning `<name>.w` and `<name>.b`."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 3, *,
                 dilation: int = 1, init: str = "he"):
        self.name = name
        self.spec = ConvSpec(cin, cout, k, dilation=dilation)
        self.init_scheme = init

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        s = self.spec
        shape = (s.out_channels, s.in_channels, s.kernel, s.kernel)
        if self.init_scheme == "he":
            w = tensor.he_init(shape, stream, dtype)
        elif self.init_scheme == "zero":
            w = tensor.zeros(shape, dtype)
        else:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        store.add(f"{self.name}.w", w)
        store.add(f"{self.name}.b", tensor.zeros((1, s.out_channels, 1, 1), dtype))

    def forward(self, store: ParamStore, x: np.ndarray):
        w = store[f"{self.name}.w"].value
        b = store[f"{self.name}.b"].value.reshape(-1)
        y = conv2d_forward(x, self.spec, w, b)
        return y, x

    def backward(self, store: ParamStore, cache, dy: np.ndarray,
                 need_grad_x: bool = True):
        x = cache
        w = store[f"{self.name}.w"].value
        dx, dw, db = conv2d_backward(x, self.spec, w, dy, need_grad_x=need_grad_x)
        store[f"{self.name}.w"].grad += dw
        store[f"{self.name}.b"].grad += db.reshape(1, -1, 1, 1)
        return dx


class CFM:
    """Conditioned feature modulation: gamma/beta from 1x1 convs over the
    guide features, output = gamma * x + beta.  Initialized to identity."""

    def __init__(self, name: str, guide_channels: int, width: int):
        self.name = name
        self.spec = ConvSpec(guide_channels, width, 1)

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        s = self.spec
        shape = (s.out_channels, s.in_channels, 1, 1)
        store.add(f"{self.name}.gamma_w", tensor.zeros(shape, dtype))
        store.add(f"{self.name}.gamma_b", tensor.constant((1, s.out_channels, 1, 1), 1.0, dtype))
        store.add(f"{self.name}.beta_w", tensor.zeros(shape, dtype))
        store.add(f"{self.name}.beta_b", tensor.zeros((1, s.out_channels, 1, 1), dtype))

    def forward(self, store: ParamStore, x: np.ndarray, g: np.ndarray):
        if g.shape[2:] != x.shape[2:]:
            raise ValueError(
                f"guide spatial size {g.shape[2:]} does not match input {x.shape[2:]}")
        gamma = conv2d_forward(g, self.spec, store[f"{self.name}.gamma_w"].value,
                               store[f"{self.name}.gamma_b"].value.reshape(-1))
        beta = conv2d_forward(g, self.spec, store[f"{self.name}.beta_w"].value,
                              store[f"{self.name}.beta_b"].value.reshape(-1))
        y = gamma * x + beta
        return y, (x, g, gamma)

    def backward(self, store: ParamStore, cache, dy: np.ndarray):
        x, g, gamma = cache
        dx = dy * gamma
        dgamma = dy * x
        dbeta = dy
        dg = np.zeros_like(g)
        for head, dh in (("gamma", dgamma), ("beta", dbeta)):
            w = store[f"{self.name}.{head}_w"].value
            dgi, dw, db = conv2d_backward(g, self.spec, w, dh)
            dg += dgi
            store[f"{self.name}.{head}_w"].grad += dw
            store[f"{self.name}.{head}_b"].grad += db.reshape(1, -1, 1, 1)
        return dx, dg


class OffsetGenerator:
    """1x1 conv producing the 2*K*K offset channels; zero-initialized so a
    fresh deformable layer degenerates to a standard convolution."""

    def __init__(self, name: str, cin: int, kernel: int):
        self.name = name
        self.kernel = kernel
        self.spec = ConvSpec(cin, offset_channels(kernel), 1)

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        s = self.spec
        store.add(f"{self.name}.w", tensor.zeros((s.out_channels, s.in_channels, 1, 1), dtype))
        store.add(f"{self.name}.b", tensor.zeros((1, s.out_channels, 1, 1), dtype))

    def forward(self, store: ParamStore, x: np.ndarray):
        y = conv2d_forward(x, self.spec, store[f"{self.name}.w"].value,
                           store[f"{self.name}.b"].value.reshape(-1))
        return y, x

    def backward(self, store: ParamStore, cache, dy: np.ndarray):
        x = cache
        dx, dw, db = conv2d_backward(x, self.spec, store[f"{self.name}.w"].value, dy)
        store[f"{self.name}.w"].grad += dw
        store[f"{self.name}.b"].grad += db.reshape(1, -1, 1, 1)
        return dx


class DeformConv:
    """Deformable conv with its own offset generator reading the input."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 3):
        self.name = name
        self.spec = ConvSpec(cin, cout, k)
        self.offset_gen = OffsetGenerator(f"{name}.offset", cin, k)

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        s = self.spec
        store.add(f"{self.name}.w",
                  tensor.he_init((s.out_channels, s.in_channels, s.kernel, s.kernel),
                                 stream, dtype))
        store.add(f"{self.name}.b", tensor.zeros((1, s.out_channels, 1, 1), dtype))
        self.offset_gen.init_params(store, stream, dtype)

    def forward(self, store: ParamStore, x: np.ndarray):
        offsets, off_cache = self.offset_gen.forward(store, x)
        y = deform_conv_forward(x, self.spec, store[f"{self.name}.w"].value,
                                store[f"{self.name}.b"].value.reshape(-1), offsets)
        return y, (x, offsets, off_cache)

    def backward(self, store: ParamStore, cache, dy: np.ndarray):
        x, offsets, off_cache = cache
        w = store[f"{self.name}.w"].value
        dx, dw, db, doff = deform_conv_backward(x, self.spec, w, offsets, dy)
        store[f"{self.name}.w"].grad += dw
        store[f"{self.name}.b"].grad += db.reshape(1, -1, 1, 1)
        dx += self.offset_gen.backward(store, off_cache, doff)
        return dx


class ResBlock:
    """conv3x3 -> ReLU -> second conv (plain / atrous / deformable) ->
    optional CFM -> identity skip."""

    VARIANTS = ("plain", "atrous", "cfm", "deform_cfm")

    def __init__(self, name: str, width: int, variant: str = "plain", *,
                 dilation: int = 1, guide_channels: int = 0):
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown residual block variant {variant!r}")
        self.name = name
        self.variant = variant
        self.conv1 = Conv(f"{name}.conv1", width, width, 3)
        if variant == "deform_cfm":
            self.conv2 = DeformConv(f"{name}.conv2", width, width, 3)
        else:
            self.conv2 = Conv(f"{name}.conv2", width, width, 3,
                              dilation=dilation if variant == "atrous" else 1)
        self.cfm = None
        if variant in ("cfm", "deform_cfm"):
            if guide_channels <= 0:
                raise ValueError(f"variant {variant!r} needs guide_channels > 0")
            self.cfm = CFM(f"{name}.cfm", guide_channels, width)

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        self.conv1.init_params(store, stream, dtype)
        self.conv2.init_params(store, stream, dtype)
        if self.cfm is not None:
            self.cfm.init_params(store, stream, dtype)

    def forward(self, store: ParamStore, x: np.ndarray, g: np.ndarray | None = None):
        h1, c1 = self.conv1.forward(store, x)
        a1 = tensor.relu(h1)
        h2, c2 = self.conv2.forward(store, a1)
        if self.cfm is not None:
            if g is None:
                raise ValueError(f"block {self.name} needs guide features")
            h3, c3 = self.cfm.forward(store, h2, g)
        else:
            h3, c3 = h2, None
        return h3 + x, (c1, h1, c2, c3)

    def backward(self, store: ParamStore, cache, dy: np.ndarray):
        c1, h1, c2, c3 = cache
        dg = None
        if self.cfm is not None:
            dh2, dg = self.cfm.backward(store, c3, dy)
        else:
            dh2 = dy
        da1 = self.conv2.backward(store, c2, dh2)
        dh1 = tensor.relu_backward(h1, da1)
        dx = self.conv1.backward(store, c1, dh1)
        dx += dy  # identity skip
        return dx, dg


class RecurrentMerge:
    """Fuses current features with the level's hidden state: channel concat
    followed by a 3x3 conv and ReLU; the fused map is the new hidden state."""

    def __init__(self, name: str, width: int):
        self.name = name
        self.width = width
        self.conv = Conv(f"{name}.fuse", 2 * width, width, 3)

    def init_params(self, store: ParamStore, stream: RngStream, dtype=tensor.DTYPE) -> None:
        self.conv.init_params(store, stream, dtype)

    def forward(self, store: ParamStore, x: np.ndarray, hidden: np.ndarray):
        xc = np.concatenate([x, hidden], axis=1)
        h, c = self.conv.forward(store, xc)
        y = tensor.relu(h)
        return y, (c, h)

    def backward(self, store: ParamStore, cache, dy: np.ndarray):
        c, h = cache
        dh = tensor.relu_backward(h, dy)
        dxc = self.conv.backward(store, c, dh)
        return dxc[:, :self.width], dxc[:, self.width:]
