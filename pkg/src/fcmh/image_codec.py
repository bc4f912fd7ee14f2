"""Human-vision reconstruction network on top of the frozen feature codec.

A small color-latent codec (encoder/decoder pair with a factorized entropy
model) carries the color cues the machine features lack. The fusion network
combines decoded machine features with the decoded color latent; concatenated
with the current noisy latent it conditions the controlled U-Net, and spaced
ancestral sampling followed by the frozen image autoencoder yields the final
picture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, mse, no_grad, tensor
from .container import Bitstream
from .diffusion import ControlledUNet, NoiseSchedule
from .entropy import FactorizedPrior, QuantMode, quantize, round_away
from .errors import ContractError, FormatError
from .feature_codec import PIXELS, FeatureCodec
from .layers import LEAKY_SLOPE, Conv2d, Deconv2d, ResBlock, SEBlock
from .optim import Adam, cosine_lr
from .params import ParamStore, fnv1a64
from .rangecoder import range_decode, range_encode
from .rng import Xoshiro256, derive_seed
from .toydata import FeaturePyramid, ToyImage
from .vae import LATENT_SHAPE, ImageAutoencoder

COLOR_LATENT_SHAPE = (8, 8, 8)   # y_s
FUSED_CH = 32
COND_CH = FUSED_CH + LATENT_SHAPE[0]  # fused features plus noisy-latent channels
TRAIN_S = 0.8  # machine-stream scale factor fixed during training


@dataclass
class HvcnLossReport:
    l_s: float    # noise prediction, per-element mean
    l_a: float    # diffusion-space alignment, per-element mean
    l_rs: float   # color-latent rate, bits per image pixel
    l_hv: float


class HumanCodec:
    ARCH = "hvcn/v1 ys8x8x8 fcn68-32 unet32 cm16"

    def __init__(self, seed: int = 0, schedule: NoiseSchedule | None = None):
        ps = ParamStore()
        rng = Xoshiro256(derive_seed(seed, "hvcn-init"))
        self.schedule = schedule or NoiseSchedule()
        zc, (yc, _, _) = LATENT_SHAPE[0], COLOR_LATENT_SHAPE

        self.le1 = Conv2d(ps, "le.conv1", zc, 16, 3, pad=1, rng=rng)
        self.le2 = Conv2d(ps, "le.conv2", 16, yc, 3, stride=2, pad=1, rng=rng)
        self.ld1 = Conv2d(ps, "ld.conv1", yc, 16, 3, pad=1, rng=rng)
        self.ld2 = Deconv2d(ps, "ld.deconv2", 16, zc, 4, stride=2, pad=1, rng=rng)
        self.prior_color = FactorizedPrior(ps, "prior_color", yc, rng)

        fcn_in = 32 + 32 + zc
        self.fcn_in = Conv2d(ps, "fcn.in", fcn_in, FUSED_CH, 3, pad=1, rng=rng)
        self.fcn_rb = ResBlock(ps, "fcn.rb", FUSED_CH, FUSED_CH, rng)
        self.fcn_att = SEBlock(ps, "fcn.att", FUSED_CH, rng)
        self.fcn_out = Conv2d(ps, "fcn.out", FUSED_CH, FUSED_CH, 3, pad=1, rng=rng)
        self.align_proj = Conv2d(ps, "fcn.align", FUSED_CH, zc, 1, rng=rng)

        self.unet = ControlledUNet(ps, "unet", zc, COND_CH, rng, self.schedule)
        ps.set_meta("arch_hash", float(fnv1a64(self.ARCH.encode()) % 2 ** 24))
        self.ps = ps

    # -- color-latent codec (ACN) -------------------------------------------

    def _le(self, z_s: Tensor) -> Tensor:
        return self.le2(self.le1(z_s).leaky_relu(LEAKY_SLOPE))

    def _ld(self, y_s: Tensor) -> Tensor:
        return self.ld2(self.ld1(y_s).leaky_relu(LEAKY_SLOPE))

    def acn_compress(self, z_s: np.ndarray) -> tuple[bytes, np.ndarray]:
        """Code one color latent; returns (payload, decoded latent)."""
        self.ps.require_trained("human codec")
        with no_grad():
            y_s = self._le(tensor(z_s[None]))
            y_hat = round_away(y_s.data[0])
            z_hat = self._ld(tensor(y_hat[None])).data[0]
        syms = y_hat.reshape(-1).astype(np.int64)
        payload = range_encode(syms, self.prior_color.provider(COLOR_LATENT_SHAPE))
        return payload, z_hat

    def acn_decompress(self, payload: bytes) -> np.ndarray:
        self.ps.require_trained("human codec")
        syms = range_decode(payload, self.prior_color.provider(COLOR_LATENT_SHAPE),
                            int(np.prod(COLOR_LATENT_SHAPE)))
        y_hat = syms.reshape(COLOR_LATENT_SHAPE).astype(np.float64)
        with no_grad():
            return self._ld(tensor(y_hat[None])).data[0]

    def acn_estimate_bits(self, z_s: np.ndarray) -> float:
        with no_grad():
            y_s = self._le(tensor(z_s[None]))
            y_hat = round_away(y_s.data[0])
        return float(self.prior_color.estimate_bits_np(y_hat).sum())

    # -- fusion --------------------------------------------------------------

    def fuse(self, p2: Tensor, p3: Tensor, z_s_hat: Tensor) -> Tensor:
        """Fused condition features (without the noisy-latent channels)."""
        if p3.shape[2] * 2 != p2.shape[2]:
            raise ContractError("P3 must be half the spatial size of P2")
        merged = ad.concat([p2, p3.upsample_nearest(2), z_s_hat], axis=1)
        h = self.fcn_in(merged).leaky_relu(LEAKY_SLOPE)
        h = self.fcn_rb(h)
        h = self.fcn_att(h)
        return self.fcn_out(h)

    def fcn_fuse(self, p2: np.ndarray, p3: np.ndarray, z_s_hat: np.ndarray,
                 z_t: np.ndarray) -> np.ndarray:
        """Full condition c_f = FCN(P2, P3, z_s) concat z_t, numpy in/out."""
        with no_grad():
            fused = self.fuse(tensor(p2[None]), tensor(p3[None]),
                              tensor(z_s_hat[None]))
            cond = ad.concat([fused, tensor(z_t[None])], axis=1)
        return cond.data[0]

    def predict_noise(self, z_t: np.ndarray, t: int, cond: np.ndarray
                      ) -> np.ndarray:
        with no_grad():
            out = self.unet.predict_noise(tensor(z_t[None]), np.array([t]),
                                          tensor(cond[None]))
        return out.data[0]

    # -- losses & training ----------------------------------------------------

    def loss_batch(self, z_s: np.ndarray, p2: np.ndarray, p3: np.ndarray,
                   lambda_a: float, lambda_rs: float, noise_seed: int
                   ) -> tuple[Tensor, HvcnLossReport]:
        n = z_s.shape[0]
        rng = Xoshiro256(derive_seed(noise_seed, "hvcn-noise"))
        t = 1 + rng.integers(self.schedule.steps, n)
        eps = rng.normal(z_s.shape)
        z_t = self.schedule.marginal(z_s, t, eps)

        y_s = self._le(tensor(z_s))
        y_hat = quantize(y_s, QuantMode.ADDITIVE_NOISE, rng)
        z_s_hat = self._ld(y_hat)
        p_color = self.prior_color.likelihood(y_hat)
        l_rs = p_color.log().sum() * (-1.0 / math.log(2.0) / n / PIXELS)

        fused = self.fuse(tensor(p2), tensor(p3), z_s_hat)
        cond = ad.concat([fused, tensor(z_t)], axis=1)
        eps_hat = self.unet.predict_noise(tensor(z_t), t, cond)
        l_s = mse(eps_hat, tensor(eps))
        l_a = mse(self.align_proj(fused), tensor(z_s))
        loss = l_s + lambda_a * l_a + lambda_rs * l_rs
        report = HvcnLossReport(l_s=float(l_s.data), l_a=float(l_a.data),
                                l_rs=float(l_rs.data), l_hv=float(loss.data))
        return loss, report

    def train(self, images: list[ToyImage], pyramids: list[FeaturePyramid],
              vae: ImageAutoencoder, feature_codec: FeatureCodec,
              lambda_a: float, lambda_rs: float, steps: int, lr: float = 1e-3,
              batch: int = 8, seed: int = 0, log=None) -> list[float]:
        """Optimize the human path against frozen VAE and feature codec."""
        if not images:
            raise ContractError("cannot train the human codec on an empty dataset")
        vae.ps.require_trained("image autoencoder")
        feature_codec.ps.require_trained("feature codec")
        z_s, p2, p3 = prepare_conditioning(images, pyramids, vae, feature_codec)

        opt = Adam(self.ps.trainable(), lr=lr)
        order = Xoshiro256(derive_seed(seed, "hvcn-batches"))
        history = []
        for step in range(steps):
            idx = order.integers(len(images), batch)
            loss, report = self.loss_batch(
                z_s[idx], p2[idx], p3[idx], lambda_a, lambda_rs,
                noise_seed=derive_seed(seed, "hvcn", step))
            if not np.isfinite(loss.data):
                raise ContractError(f"human-codec training diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(lr, step, steps))
            history.append(report.l_s)
            if log is not None and (step % 200 == 0 or step == steps - 1):
                log(step, report)
        self.ps.mark_trained()
        return history

    # -- end-to-end human path --------------------------------------------------

    def sample_image(self, p2: np.ndarray, p3: np.ndarray, z_s_hat: np.ndarray,
                     vae: ImageAutoencoder, k: int, seed: int) -> np.ndarray:
        """Run spaced sampling conditioned on decoded features, then decode."""
        self.ps.require_trained("human codec")
        with no_grad():
            fused = self.fuse(tensor(p2[None]), tensor(p3[None]),
                              tensor(z_s_hat[None]))

        def cond_fn(z_t: Tensor) -> Tensor:
            return ad.concat([fused, z_t], axis=1)

        z0 = self.unet.sample(cond_fn, LATENT_SHAPE, k, seed)
        return vae.decode(z0)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        self.ps.save(path)

    @classmethod
    def load(cls, path) -> "HumanCodec":
        model = cls()
        stored = ParamStore.load(path)
        expected = model.ps.get_meta("arch_hash")
        got = stored.get_meta("arch_hash")
        if got is None or float(got[0]) != float(expected[0]):
            raise FormatError("architecture hash mismatch in human codec file")
        model.ps.load_into(stored)
        return model


def prepare_conditioning(images: list[ToyImage], pyramids: list[FeaturePyramid],
                         vae: ImageAutoencoder, feature_codec: FeatureCodec,
                         s: float = TRAIN_S, batch: int = 32
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precompute (z_s, decoded P2, decoded P3) arrays for a dataset.

    The machine stream is simulated with round quantization at the fixed
    training scale; entropy coding is value-preserving so running the real
    coder here would change nothing.
    """
    if len(images) != len(pyramids):
        raise ContractError("images and pyramids must pair up one-to-one")
    z_all = []
    for i in range(0, len(images), batch):
        pixels = np.stack([im.pixels for im in images[i:i + batch]])
        z_all.append(vae.encode_images(pixels))
    p2_all, p3_all = [], []
    for i in range(0, len(pyramids), batch):
        feats = feature_codec.roundtrip_features(pyramids[i:i + batch], s)
        p2_all.extend(f.p2 for f in feats)
        p3_all.extend(f.p3 for f in feats)
    return np.concatenate(z_all), np.stack(p2_all), np.stack(p3_all)


def encode_human_stream(image: ToyImage, pyramid: FeaturePyramid,
                        human: HumanCodec, vae: ImageAutoencoder,
                        feature_codec: FeatureCodec, s: float) -> Bitstream:
    """Machine stream plus the optional color payload in one container."""
    stream = feature_codec.encode(pyramid, s)
    z_s = vae.encode(image)
    payload, _ = human.acn_compress(z_s)
    stream.color_payload = payload
    return stream


def decode_human_stream(stream: Bitstream, human: HumanCodec,
                        vae: ImageAutoencoder, feature_codec: FeatureCodec,
                        k: int, seed: int) -> np.ndarray:
    """Reconstruct an image for human viewing from a combined stream."""
    if not stream.has_human_payload:
        raise ContractError("stream carries no color payload (machine-only)")
    feats = feature_codec.decode(stream)
    z_s_hat = human.acn_decompress(stream.color_payload)
    return human.sample_image(feats.p2, feats.p3, z_s_hat, vae, k, seed)
