"""Denoising diffusion in latent space with a zero-convolution control branch.

The noise predictor is a small two-resolution U-Net conditioned on sinusoidal
timestep embeddings. A half-width trainable copy of its encoder digests the
fused condition and injects features through zero-initialized 1x1 convs at
matching encoder resolutions, so an untrained control branch leaves the
backbone's predictions untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, tensor
from .errors import ContractError
from .layers import LEAKY_SLOPE, Conv2d, ResBlock, timestep_embedding
from .params import ParamStore
from .rng import Xoshiro256, derive_seed


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def marginal(self, z0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Forward-noised z_t for integer timesteps t in [1, T]."""
        ab = self.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def spaced_timesteps(total: int, k: int) -> list[int]:
    """Uniform-stride descending subset of [1, total], endpoints included."""
    if k < 1 or k > total:
        raise ContractError(f"sampling steps must be in [1, {total}], got {k}")
    if k == 1:
        return [total]
    taus = np.unique(np.round(np.linspace(1, total, k)).astype(np.int64))
    return [int(t) for t in taus[::-1]]


class ControlledUNet:
    """Noise predictor with a control branch on the fused condition."""

    BASE = 32
    CM_BASE = 16  # half-width copy of the backbone encoder
    EMB = 32

    def __init__(self, ps: ParamStore, name: str, latent_ch: int, cond_ch: int,
                 rng: Xoshiro256, schedule: NoiseSchedule):
        self.schedule = schedule
        self.latent_ch = latent_ch
        self.cond_ch = cond_ch
        b, cm, e = self.BASE, self.CM_BASE, self.EMB

        self.emb1 = Conv2d(ps, f"{name}.emb1", e, e, 1, rng=rng)
        self.emb2 = Conv2d(ps, f"{name}.emb2", e, e, 1, rng=rng)

        self.conv_in = Conv2d(ps, f"{name}.in", latent_ch, b, 3, pad=1, rng=rng)
        self.down1 = ResBlock(ps, f"{name}.down1", b, b, rng, emb_dim=e)
        self.downsample = Conv2d(ps, f"{name}.pool", b, b, 3, stride=2, pad=1,
                                 rng=rng)
        self.down2 = ResBlock(ps, f"{name}.down2", b, 2 * b, rng, emb_dim=e)
        self.mid = ResBlock(ps, f"{name}.mid", 2 * b, 2 * b, rng, emb_dim=e)
        self.up = ResBlock(ps, f"{name}.up", 3 * b, b, rng, emb_dim=e)
        self.conv_out = Conv2d(ps, f"{name}.out", b, latent_ch, 3, pad=1,
                               rng=rng, zero_init=True)

        self.cm_in = Conv2d(ps, f"{name}.cm.in", cond_ch, cm, 3, pad=1, rng=rng)
        self.cm_rb1 = ResBlock(ps, f"{name}.cm.rb1", cm, cm, rng)
        self.cm_pool = Conv2d(ps, f"{name}.cm.pool", cm, cm, 3, stride=2, pad=1,
                              rng=rng)
        self.cm_rb2 = ResBlock(ps, f"{name}.cm.rb2", cm, 2 * cm, rng)
        self.cm_mid = ResBlock(ps, f"{name}.cm.mid", 2 * cm, 2 * cm, rng)
        self.zero1 = Conv2d(ps, f"{name}.z1", cm, b, 1, zero_init=True)
        self.zero2 = Conv2d(ps, f"{name}.z2", 2 * cm, 2 * b, 1, zero_init=True)
        self.zero3 = Conv2d(ps, f"{name}.z3", 2 * cm, 2 * b, 1, zero_init=True)

    def _embed(self, t: np.ndarray) -> Tensor:
        emb = tensor(timestep_embedding(t, self.EMB))
        return self.emb2(self.emb1(emb).leaky_relu(LEAKY_SLOPE))

    def _control(self, cond: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        c = self.cm_in(cond).leaky_relu(LEAKY_SLOPE)
        c1 = self.cm_rb1(c)
        cd = self.cm_pool(c1).leaky_relu(LEAKY_SLOPE)
        c2 = self.cm_rb2(cd)
        c3 = self.cm_mid(c2)
        return self.zero1(c1), self.zero2(c2), self.zero3(c3)

    def predict_noise(self, z_t: Tensor, t: np.ndarray,
                      cond: Tensor | None) -> Tensor:
        """Estimated noise for z_t at integer timesteps t (shape (N,))."""
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if np.any(t < 1) or np.any(t > self.schedule.steps):
            raise ContractError(
                f"timestep out of range [1, {self.schedule.steps}]: {t}")
        if cond is not None and cond.shape[1] != self.cond_ch:
            raise ContractError(
                f"condition has {cond.shape[1]} channels, expected {self.cond_ch}")
        emb = self._embed(t)
        ctrl = self._control(cond) if cond is not None else None

        h = self.conv_in(z_t).leaky_relu(LEAKY_SLOPE)
        h1 = self.down1(h, emb)
        if ctrl is not None:
            h1 = h1 + ctrl[0]
        hd = self.downsample(h1).leaky_relu(LEAKY_SLOPE)
        h2 = self.down2(hd, emb)
        if ctrl is not None:
            h2 = h2 + ctrl[1]
        hm = self.mid(h2, emb)
        if ctrl is not None:
            hm = hm + ctrl[2]
        hu = ad.concat([hm.upsample_nearest(2), h1], axis=1)
        hu = self.up(hu, emb)
        return self.conv_out(hu)

    def sample(self, cond_fn, shape: tuple[int, int, int], k: int, seed: int,
               x0_clip: float = 4.0) -> np.ndarray:
        """Spaced ancestral sampling; `cond_fn(z_t)` supplies the condition."""
        taus = spaced_timesteps(self.schedule.steps, k)
        rng = Xoshiro256(derive_seed(seed, "ddpm-sample"))
        ab = self.schedule.alpha_bar
        z = rng.normal((1,) + shape)
        with no_grad():
            for idx, t in enumerate(taus):
                t_prev = taus[idx + 1] if idx + 1 < len(taus) else 0
                ab_t = ab[t - 1]
                ab_prev = 1.0 if t_prev == 0 else ab[t_prev - 1]
                cond = cond_fn(tensor(z))
                eps = self.predict_noise(tensor(z), np.array([t]), cond).data
                x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
                x0 = np.clip(x0, -x0_clip, x0_clip)
                alpha_eff = ab_t / ab_prev
                beta_eff = 1.0 - alpha_eff
                mean = (math.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)) * x0 \
                    + (math.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)) * z
                if t_prev > 0:
                    var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
                    z = mean + math.sqrt(var) * rng.normal(z.shape)
                else:
                    z = mean
        return z[0]
