"""Image autoencoder supplying the diffusion latent space.

Pretrained on the toy images with MSE plus a small KL penalty, then frozen.
Encoded latents are standardized by stored per-channel statistics so the
diffusion side sees roughly unit-variance inputs; decoding reverses the
standardization before the conv stack.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, mse, no_grad, tensor
from .errors import ContractError, FormatError
from .layers import LEAKY_SLOPE, Conv2d
from .optim import Adam, cosine_lr
from .params import ParamStore, fnv1a64
from .rng import Xoshiro256, derive_seed
from .toydata import ToyImage

LATENT_SHAPE = (4, 16, 16)


class ImageAutoencoder:
    ARCH = "vae/v1 3-32-64 z4x16x16"

    def __init__(self, seed: int = 0):
        ps = ParamStore()
        rng = Xoshiro256(derive_seed(seed, "vae-init"))
        self.e1 = Conv2d(ps, "enc.conv1", 3, 32, 3, stride=2, pad=1, rng=rng)
        self.e2 = Conv2d(ps, "enc.conv2", 32, 64, 3, stride=2, pad=1, rng=rng)
        self.e3 = Conv2d(ps, "enc.conv3", 64, 64, 3, pad=1, rng=rng)
        self.e4 = Conv2d(ps, "enc.out", 64, 8, 3, pad=1, rng=rng)
        self.d1 = Conv2d(ps, "dec.conv1", 4, 64, 3, pad=1, rng=rng)
        self.d2 = Conv2d(ps, "dec.conv2", 64, 32, 3, pad=1, rng=rng)
        self.d3 = Conv2d(ps, "dec.conv3", 32, 32, 3, pad=1, rng=rng)
        self.d4 = Conv2d(ps, "dec.out", 32, 3, 3, pad=1, rng=rng)
        ps.set_meta("arch_hash", float(fnv1a64(self.ARCH.encode()) % 2 ** 24))
        ps.set_meta("z_mean", np.zeros(4))
        ps.set_meta("z_std", np.ones(4))
        self.ps = ps

    # -- raw network -------------------------------------------------------

    def _encode_params(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.e1(x).leaky_relu(LEAKY_SLOPE)
        h = self.e2(h).leaky_relu(LEAKY_SLOPE)
        h = self.e3(h).leaky_relu(LEAKY_SLOPE)
        out = self.e4(h)
        return out.slice_axis(1, 0, 4), out.slice_axis(1, 4, 8)

    def _decode(self, z: Tensor) -> Tensor:
        h = self.d1(z).leaky_relu(LEAKY_SLOPE)
        h = h.upsample_nearest(2)
        h = self.d2(h).leaky_relu(LEAKY_SLOPE)
        h = h.upsample_nearest(2)
        h = self.d3(h).leaky_relu(LEAKY_SLOPE)
        return self.d4(h)

    # -- public frozen-use api ----------------------------------------------

    def _stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = np.asarray(self.ps.get_meta("z_mean")).reshape(1, 4, 1, 1)
        std = np.asarray(self.ps.get_meta("z_std")).reshape(1, 4, 1, 1)
        return mean, std

    def encode_images(self, pixels: np.ndarray) -> np.ndarray:
        """(N, 3, 64, 64) images -> standardized (N, 4, 16, 16) latents."""
        self.ps.require_trained("image autoencoder")
        with no_grad():
            mu, _ = self._encode_params(tensor(pixels))
        mean, std = self._stats()
        return (mu.data - mean) / std

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        """Standardized latents -> images clamped to [0, 1]."""
        self.ps.require_trained("image autoencoder")
        mean, std = self._stats()
        with no_grad():
            out = self._decode(tensor(z * std + mean))
        return np.clip(out.data, 0.0, 1.0)

    def encode(self, image: ToyImage) -> np.ndarray:
        return self.encode_images(image.pixels[None])[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.decode_latents(z[None])[0]

    # -- training ------------------------------------------------------------

    def loss_batch(self, pixels: np.ndarray, kl_weight: float,
                   noise_seed: int) -> tuple[Tensor, float, float]:
        x = tensor(pixels)
        mu, logvar = self._encode_params(x)
        rng = Xoshiro256(derive_seed(noise_seed, "vae-noise"))
        eps = tensor(rng.normal(mu.shape))
        z = mu + (logvar * 0.5).exp() * eps
        recon = self._decode(z)
        rec = mse(recon, x)
        kl = (mu * mu + logvar.exp() - logvar - 1.0).mean() * 0.5
        loss = rec + kl_weight * kl
        return loss, float(rec.data), float(kl.data)

    def train(self, dataset: list[ToyImage], steps: int, lr: float = 1e-3,
              batch: int = 8, kl_weight: float = 1e-4, seed: int = 0,
              log=None) -> list[float]:
        if not dataset:
            raise ContractError("cannot train the autoencoder on an empty dataset")
        opt = Adam(self.ps.trainable(), lr=lr)
        order = Xoshiro256(derive_seed(seed, "vae-batches"))
        history = []
        for step in range(steps):
            idx = order.integers(len(dataset), batch)
            pixels = np.stack([dataset[i].pixels for i in idx])
            loss, rec, kl = self.loss_batch(pixels, kl_weight,
                                            noise_seed=derive_seed(seed, "vae", step))
            if not np.isfinite(loss.data):
                raise ContractError(f"autoencoder diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(lr, step, steps))
            history.append(rec)
            if log is not None and (step % 200 == 0 or step == steps - 1):
                log(step, rec, kl)
        self._calibrate_latents(dataset)
        self.ps.mark_trained()
        return history

    def _calibrate_latents(self, dataset: list[ToyImage], batch: int = 64) -> None:
        mus = []
        with no_grad():
            for i in range(0, len(dataset), batch):
                pixels = np.stack([im.pixels for im in dataset[i:i + batch]])
                mu, _ = self._encode_params(tensor(pixels))
                mus.append(mu.data)
        z = np.concatenate(mus)
        self.ps.set_meta("z_mean", z.mean(axis=(0, 2, 3)))
        self.ps.set_meta("z_std", np.maximum(z.std(axis=(0, 2, 3)), 1e-6))

    def freeze(self) -> None:
        for t in self.ps.trainable():
            t.requires_grad = False

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self.ps.save(path)

    @classmethod
    def load(cls, path) -> "ImageAutoencoder":
        model = cls()
        stored = ParamStore.load(path)
        expected = model.ps.get_meta("arch_hash")
        got = stored.get_meta("arch_hash")
        if got is None or float(got[0]) != float(expected[0]):
            raise FormatError("architecture hash mismatch in autoencoder file")
        model.ps.load_into(stored)
        return model
