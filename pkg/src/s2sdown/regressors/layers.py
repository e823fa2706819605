"""Layers with hand-written reverse-mode gradients, NCHW float64 tensors.

Each layer caches what its backward pass needs during ``forward`` and writes
parameter gradients into ``self.grads`` during ``backward``; ``backward``
returns the gradient with respect to the layer input. A layer instance is used
once per forward pass.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.no_decay: set[str] = set()
        self.children: dict[str, Module] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, ch in self.children.items():
            yield from ch.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads.get(k, np.zeros_like(self.params[k]))
        for name, ch in self.children.items():
            yield from ch.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, ch in self.children.items():
            yield from ch.named_buffers(f"{prefix}{name}.")

    def decay_names(self, prefix: str = "") -> set[str]:
        out = {prefix + k for k in self.params if k not in self.no_decay}
        for name, ch in self.children.items():
            out |= ch.decay_names(f"{prefix}{name}.")
        return out

    def zero_grads(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        for ch in self.children.values():
            ch.zero_grads()


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


class DepthwiseConv2d(Module):
    """Per-channel k x k convolution, zero 'same' padding, no bias."""

    def __init__(self, channels: int, k: int = 3, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / k
        self.k = k
        self.params["w"] = rng.uniform(-bound, bound, size=(channels, k, k)) * np.sqrt(3.0)

    def forward(self, x, train=True):
        k, p = self.k, self.k // 2
        N, C, H, W = x.shape
        xp = _pad(x, p)
        w = self.params["w"]
        y = np.zeros_like(x)
        for a in range(k):
            for b in range(k):
                y += w[None, :, a, b, None, None] * xp[:, :, a:a + H, b:b + W]
        self._xp = xp
        return y

    def backward(self, dy):
        k, p = self.k, self.k // 2
        xp, w = self._xp, self.params["w"]
        N, C, H, W = dy.shape
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                dw[:, a, b] = np.einsum("nchw,nchw->c", dy, xp[:, :, a:a + H, b:b + W])
                dxp[:, :, a:a + H, b:b + W] += w[None, :, a, b, None, None] * dy
        self.grads["w"] = dw
        return dxp[:, :, p:p + H, p:p + W]


class Conv2d(Module):
    """Dense k x k convolution, zero 'same' padding, no bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.k = k
        self.params["w"] = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))

    def forward(self, x, train=True):
        p = self.k // 2
        cols = sliding_window_view(_pad(x, p), (self.k, self.k), axis=(2, 3))
        self._cols = cols
        # cols: (N, C, H, W, k, k)
        y = np.tensordot(cols, self.params["w"], axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def backward(self, dy):
        k, p = self.k, self.k // 2
        cols, w = self._cols, self.params["w"]
        N, O, H, W = dy.shape
        self.grads["w"] = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N, H, W, C, k, k)
        C = w.shape[1]
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
        for a in range(k):
            for b in range(k):
                dxp[:, :, a:a + H, b:b + W] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W]


class PointwiseConv2d(Module):
    """1 x 1 convolution (channel mixing)."""

    def __init__(self, c_in: int, c_out: int, bias: bool = False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["w"] = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in))
        self.bias = bias
        if bias:
            self.params["b"] = np.zeros(c_out)
            self.no_decay.add("b")

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        self._x = x.reshape(N, C, H * W)
        y = self.params["w"] @ self._x
        if self.bias:
            y = y + self.params["b"][None, :, None]
        return y.reshape(N, -1, H, W)

    def backward(self, dy):
        N, O, H, W = dy.shape
        d = dy.reshape(N, O, H * W)
        self.grads["w"] = np.tensordot(d, self._x, axes=([0, 2], [0, 2]))
        if self.bias:
            self.grads["b"] = d.sum(axis=(0, 2))
        return (self.params["w"].T @ d).reshape(N, -1, H, W)


class BatchNorm2d(Module):
    """Batch statistics in train mode (running stats updated), running stats otherwise."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.no_decay |= {"gamma", "beta"}
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def forward(self, x, train=True):
        g, b = self.params["gamma"], self.params["beta"]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            n = x.size // x.shape[1]
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - m
            rm += m * mean
            rv *= 1.0 - m
            rv += m * var * (n / max(n - 1, 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._xhat, self._inv, self._train = xhat, inv, train
        return g[None, :, None, None] * xhat + b[None, :, None, None]

    def backward(self, dy):
        xhat, inv, g = self._xhat, self._inv, self.params["gamma"]
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        dxhat = dy * g[None, :, None, None]
        if not self._train:
            return dxhat * inv[None, :, None, None]
        n = dy.size // dy.shape[1]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Module):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class MaxPool2d(Module):
    """2 x 2 max pooling, stride 2; inputs must have even height and width."""

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"max-pool needs even spatial dims, got {H}x{W}")
        r = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
        self._idx = r.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(r, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        N, C, H, W = self._shape
        d = np.zeros((N, C, H // 2, W // 2, 4))
        np.put_along_axis(d, self._idx[..., None], dy[..., None], axis=-1)
        return d.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)


def _align_corners_matrix(n: int) -> np.ndarray:
    """(2n, n) linear interpolation matrix with corner alignment."""
    m = 2 * n
    if n == 1:
        return np.ones((m, 1))
    pos = np.arange(m) * (n - 1) / (m - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - i0
    U = np.zeros((m, n))
    U[np.arange(m), i0] = 1.0 - frac
    U[np.arange(m), i0 + 1] += frac
    return U


class BilinearUpsample2x(Module):
    """Doubles H and W by bilinear interpolation (align_corners=True)."""

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        self._Uh, self._Uw = _align_corners_matrix(H), _align_corners_matrix(W)
        return np.einsum("ia,ncab,jb->ncij", self._Uh, x, self._Uw, optimize=True)

    def backward(self, dy):
        return np.einsum("ia,ncij,jb->ncab", self._Uh, dy, self._Uw, optimize=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class ChannelAttention(Module):
    """Shared two-layer perceptron over avg- and max-pooled channel descriptors, summed, sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 8, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        hidden = max(1, channels // reduction)
        self.params["w1"] = rng.normal(0.0, np.sqrt(2.0 / channels), size=(hidden, channels))
        self.params["w2"] = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(channels, hidden))

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        w1, w2 = self.params["w1"], self.params["w2"]
        flat = x.reshape(N, C, H * W)
        avg = flat.mean(axis=2)
        amax = flat.argmax(axis=2)
        mx = np.take_along_axis(flat, amax[..., None], axis=2)[..., 0]
        ha, hm = avg @ w1.T, mx @ w1.T
        ra, rm = np.maximum(ha, 0.0), np.maximum(hm, 0.0)
        gate = _sigmoid(ra @ w2.T + rm @ w2.T)
        self._cache = (flat, avg, mx, amax, ha, hm, ra, rm, gate, x.shape)
        return x * gate[:, :, None, None]

    def backward(self, dy):
        flat, avg, mx, amax, ha, hm, ra, rm, gate, shape = self._cache
        N, C, H, W = shape
        w1, w2 = self.params["w1"], self.params["w2"]
        dyf = dy.reshape(N, C, H * W)
        dgate = (dyf * flat).sum(axis=2)
        dz = dgate * gate * (1.0 - gate)
        self.grads["w2"] = dz.T @ (ra + rm)
        dha = (dz @ w2) * (ha > 0)
        dhm = (dz @ w2) * (hm > 0)
        self.grads["w1"] = dha.T @ avg + dhm.T @ mx
        davg, dmx = dha @ w1, dhm @ w1
        dx = dyf * gate[:, :, None] + davg[:, :, None] / (H * W)
        np.put_along_axis(dx, amax[..., None],
                          np.take_along_axis(dx, amax[..., None], axis=2) + dmx[..., None], axis=2)
        return dx.reshape(shape)


class SpatialAttention(Module):
    """k x k convolution over channel-wise mean and max maps, sigmoid gate."""

    def __init__(self, k: int = 7, rng=None):
        super().__init__()
        self.conv = self.add("conv", Conv2d(2, 1, k, rng=rng))

    def forward(self, x, train=True):
        N, C, H, W = x.shape
        amax = x.argmax(axis=1)
        mx = np.take_along_axis(x, amax[:, None], axis=1)
        feats = np.concatenate([x.mean(axis=1, keepdims=True), mx], axis=1)
        gate = _sigmoid(self.conv.forward(feats, train))
        self._cache = (x, amax, gate)
        return x * gate

    def backward(self, dy):
        x, amax, gate = self._cache
        C = x.shape[1]
        dz = (dy * x).sum(axis=1, keepdims=True) * gate * (1.0 - gate)
        dfeats = self.conv.backward(dz)
        dx = dy * gate + dfeats[:, 0:1] / C
        np.put_along_axis(dx, amax[:, None], np.take_along_axis(dx, amax[:, None], axis=1) + dfeats[:, 1:2], axis=1)
        return dx


class Sequential(Module):
    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        for name, m in named:
            self.add(name, m)

    def forward(self, x, train=True):
        for m in self.children.values():
            x = m.forward(x, train)
        return x

    def backward(self, dy):
        for m in reversed(list(self.children.values())):
            dy = m.backward(dy)
        return dy


def cbam(channels: int, reduction: int = 8, rng=None) -> Sequential:
    return Sequential(("channel", ChannelAttention(channels, reduction, rng)),
                      ("spatial", SpatialAttention(7, rng)))


def dsc(c_in: int, c_out: int, rng=None) -> Sequential:
    """Depthwise 3 x 3 followed by pointwise channel mixing."""
    return Sequential(("dw", DepthwiseConv2d(c_in, 3, rng)), ("pw", PointwiseConv2d(c_in, c_out, rng=rng)))


def double_conv(c_in: int, c_out: int, c_mid: int | None = None, rng=None) -> Sequential:
    c_mid = c_mid or c_out
    return Sequential(("dsc1", dsc(c_in, c_mid, rng)), ("bn1", BatchNorm2d(c_mid)), ("relu1", ReLU()),
                      ("dsc2", dsc(c_mid, c_out, rng)), ("bn2", BatchNorm2d(c_out)), ("relu2", ReLU()))
