"""Reduced SmaAt-UNet: depthwise-separable double convolutions, CBAM attention,
max-pool encoder, bilinear decoder with skip connections, 1 x 1 head and crop.

Inputs are reflect-padded to a multiple of 2**stages on both axes; the head
output is cropped (centered by default) to the target grid shape.
"""

from __future__ import annotations

import math

import numpy as np

from ..grid import DimensionError
from .layers import (BilinearUpsample2x, MaxPool2d, Module, PointwiseConv2d, cbam, double_conv)

MAX_STAGES = 5
MAX_CHANNELS = 128


def stage_channels(stages: int, base: int) -> list[int]:
    """Encoder widths per level: doubling from ``base``, the bottom level repeats the one above."""
    return [min(base * 2 ** min(i, stages - 1), MAX_CHANNELS) for i in range(stages + 1)]


def reflect_padding(in_shape: tuple[int, int], stages: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """(before, after) padding per axis that brings ``in_shape`` to a multiple of 2**stages."""
    m = 2 ** stages
    padded = [int(math.ceil(n / m) * m) for n in in_shape]
    return tuple(((p - n) // 2, p - n - (p - n) // 2) for n, p in zip(in_shape, padded))


class SmaAtUNet(Module):
    kind = "cnn"

    def __init__(self, in_shape: tuple[int, int], out_shape: tuple[int, int], stages: int = 4,
                 base_channels: int = 16, reduction: int = 8, crop_offsets: tuple[int, int] | None = None,
                 seed: int = 0):
        super().__init__()
        if not 1 <= stages <= MAX_STAGES:
            raise ValueError(f"stages must lie in 1..{MAX_STAGES}, got {stages}")
        if base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        self.in_shape = tuple(int(v) for v in in_shape)
        self.out_shape = tuple(int(v) for v in out_shape)
        self.stages, self.base_channels, self.reduction = stages, base_channels, reduction
        self.pad = reflect_padding(self.in_shape, stages)
        self.padded_shape = tuple(n + a + b for n, (a, b) in zip(self.in_shape, self.pad))
        if any(o > p for o, p in zip(self.out_shape, self.padded_shape)):
            raise DimensionError(f"output {self.out_shape} larger than padded input {self.padded_shape}")
        if crop_offsets is None:
            crop_offsets = tuple((p - o) // 2 for p, o in zip(self.padded_shape, self.out_shape))
        self.crop_offsets = tuple(int(v) for v in crop_offsets)
        if any(c < 0 or c + o > p for c, o, p in zip(self.crop_offsets, self.out_shape, self.padded_shape)):
            raise DimensionError(f"crop offsets {self.crop_offsets} do not fit {self.padded_shape}")

        rng = np.random.default_rng(seed)
        c = stage_channels(stages, base_channels)
        self.widths = c
        self.inc = self.add("inc", double_conv(1, c[0], rng=rng))
        self.att = [self.add("att0", cbam(c[0], reduction, rng))]
        self.pools, self.enc = [], []
        for i in range(1, stages + 1):
            self.pools.append(MaxPool2d())
            self.enc.append(self.add(f"enc{i}", double_conv(c[i - 1], c[i], rng=rng)))
            self.att.append(self.add(f"att{i}", cbam(c[i], reduction, rng)))
        self.ups, self.dec = [], []
        below = c[stages]
        for j in range(stages - 1, -1, -1):
            c_in = c[j] + below
            c_out = c[j - 1] if j >= 1 else c[0]
            self.ups.append(BilinearUpsample2x())
            self.dec.append(self.add(f"dec{j}", double_conv(c_in, c_out, c_in // 2, rng=rng)))
            below = c_out
        self.head = self.add("head", PointwiseConv2d(below, 1, bias=True, rng=rng))
        self._cache = None

    def config(self) -> dict:
        return {"kind": self.kind, "in_shape": list(self.in_shape), "out_shape": list(self.out_shape),
                "stages": self.stages, "base_channels": self.base_channels, "reduction": self.reduction,
                "crop_offsets": list(self.crop_offsets)}

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2 and x.shape[1] == self.in_shape[0] * self.in_shape[1]:
            x = x.reshape(-1, *self.in_shape)
        if x.ndim != 3 or x.shape[1:] != self.in_shape:
            raise DimensionError(f"input stage: expected (N, {self.in_shape[0]}, {self.in_shape[1]}), got {x.shape}")
        if any(p for pair in self.pad for p in pair):
            x = np.pad(x, ((0, 0),) + self.pad, mode="reflect")
        return x[:, None]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """(N, H_in, W_in) or (N, G_in) -> (N, G_out)."""
        h = self._prepare(x)
        f = self.inc.forward(h, train)
        skips = [self.att[0].forward(f, train)]
        for i in range(self.stages):
            f = self.enc[i].forward(self.pools[i].forward(f, train), train)
            skips.append(self.att[i + 1].forward(f, train))
        d = skips[-1]
        for k, j in enumerate(range(self.stages - 1, -1, -1)):
            u = self.ups[k].forward(d, train)
            if u.shape[2:] != skips[j].shape[2:]:
                raise DimensionError(f"decoder stage {j}: upsampled {u.shape[2:]} vs skip {skips[j].shape[2:]}")
            d = self.dec[k].forward(np.concatenate([skips[j], u], axis=1), train)
        out = self.head.forward(d, train)[:, 0]
        r0, c0 = self.crop_offsets
        ho, wo = self.out_shape
        self._cache = (x, out.shape)
        return out[:, r0:r0 + ho, c0:c0 + wo].reshape(out.shape[0], ho * wo)

    def backward(self, grad_out: np.ndarray) -> None:
        """Gradients of sum(grad_out * output) with respect to every parameter."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        _, full = self._cache
        N = full[0]
        r0, c0 = self.crop_offsets
        ho, wo = self.out_shape
        g = np.zeros(full)
        g[:, r0:r0 + ho, c0:c0 + wo] = np.asarray(grad_out).reshape(N, ho, wo)
        dd = self.head.backward(g[:, None])
        dskips = [None] * (self.stages + 1)
        for k in range(self.stages - 1, -1, -1):
            j = self.stages - 1 - k
            dcat = self.dec[k].backward(dd)
            cj = self.widths[j]
            dskips[j] = dcat[:, :cj]
            dd = self.ups[k].backward(dcat[:, cj:])
        dskips[self.stages] = dd
        df = self.att[self.stages].backward(dskips[self.stages])
        for i in range(self.stages - 1, -1, -1):
            down = self.pools[i].backward(self.enc[i].backward(df))
            df = self.att[i].backward(dskips[i]) + down
        self.inc.backward(df)
