"""Small layer building blocks on top of the autodiff engine."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore
from .rng import Xoshiro256

LEAKY_SLOPE = 0.2
_KAIMING_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))


def kaiming(rng: Xoshiro256, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=_KAIMING_GAIN / math.sqrt(fan_in))


class Conv2d:
    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, pad: int = 0, rng: Xoshiro256 | None = None,
                 zero_init: bool = False):
        self.stride, self.pad = stride, pad
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = kaiming(rng, (cout, cin, k, k), cin * k * k)
        self.w = ps.register(f"{name}.w", Tensor(w, requires_grad=True))
        self.b = ps.register(f"{name}.b", Tensor(np.zeros(cout), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, self.stride, self.pad)


class Deconv2d:
    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, pad: int = 0, rng: Xoshiro256 | None = None):
        self.stride, self.pad = stride, pad
        w = kaiming(rng, (cin, cout, k, k), cin * k * k)
        self.w = ps.register(f"{name}.w", Tensor(w, requires_grad=True))
        self.b = ps.register(f"{name}.b", Tensor(np.zeros(cout), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.deconv2d(x, self.w, self.b, self.stride, self.pad)


class MaskedConv2d:
    """Spatially causal convolution: output at (i, j) sees only raster-earlier
    positions (current position fully hidden across channels)."""

    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: Xoshiro256):
        if k % 2 == 0:
            raise ValueError("masked conv kernel must be odd")
        self.pad = k // 2
        w = kaiming(rng, (cout, cin, k, k), cin * k * k)
        self.w = ps.register(f"{name}.w", Tensor(w, requires_grad=True))
        self.b = ps.register(f"{name}.b", Tensor(np.zeros(cout), requires_grad=True))
        mask = np.zeros((1, 1, k, k))
        c = k // 2
        mask[..., :c, :] = 1.0
        mask[..., c, :c] = 1.0
        self.mask = Tensor(np.broadcast_to(mask, w.shape).copy())

    def masked_weight(self) -> Tensor:
        return ad.mul(self.w, self.mask)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.masked_weight(), self.b, 1, self.pad)


class ResBlock:
    """Two 3x3 convs with a residual skip; optional per-sample feature shift."""

    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int,
                 rng: Xoshiro256, emb_dim: int | None = None):
        self.conv1 = Conv2d(ps, f"{name}.conv1", cin, cout, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(ps, f"{name}.conv2", cout, cout, 3, pad=1, rng=rng)
        self.skip = None
        if cin != cout:
            self.skip = Conv2d(ps, f"{name}.skip", cin, cout, 1, rng=rng)
        self.emb = None
        if emb_dim is not None:
            self.emb = Conv2d(ps, f"{name}.emb", emb_dim, cout, 1, rng=rng)

    def __call__(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        h = self.conv1(x).leaky_relu(LEAKY_SLOPE)
        if self.emb is not None:
            shift = self.emb(emb)
            h = h + shift.upsample_nearest(h.shape[2] // shift.shape[2])
        h = self.conv2(h)
        s = x if self.skip is None else self.skip(x)
        return (h + s).leaky_relu(LEAKY_SLOPE)


class SEBlock:
    """Squeeze-and-excitation channel attention."""

    def __init__(self, ps: ParamStore, name: str, channels: int, rng: Xoshiro256,
                 reduction: int = 4):
        hidden = max(channels // reduction, 4)
        self.fc1 = Conv2d(ps, f"{name}.fc1", channels, hidden, 1, rng=rng)
        self.fc2 = Conv2d(ps, f"{name}.fc2", hidden, channels, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        pooled = x.mean(axis=(2, 3), keepdims=True)
        gate = self.fc2(self.fc1(pooled).leaky_relu(LEAKY_SLOPE)).sigmoid()
        return x * gate.upsample_nearest(x.shape[2])


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (N, dim, 1, 1)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t.astype(np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.reshape(t.shape[0], dim, 1, 1)
