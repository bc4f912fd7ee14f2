"""Variable-rate feature codec: compresses the largest pyramid level and
reconstructs all four levels from the single decoded latent.

Pipeline: normalize P2, transform to a 48x8x8 latent, hyper-encode to a
32x4x4 side latent, round-quantize both, entropy-code the side latent with a
factorized prior and the main latent with a Gaussian conditional fed by hyper
features plus the causal context model. Four upsample-restoration heads map
the decoded latent back to P2..P5, and the header's scale factor drives the
inverse normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, tensor
from .container import Bitstream, read_bitstream
from .entropy import (ContextModel, FactorizedPrior, GaussianContextProvider,
                      QuantMode, build_position_tables, gaussian_likelihood,
                      latent_to_symbols, neg_log2_likelihood_np, quantize,
                      round_away, symbols_to_latent)
from .errors import ContractError, FormatError
from .layers import LEAKY_SLOPE, Conv2d, Deconv2d
from .normalize import (GlobalNormParams, calibrate_global_stats,
                        ivdn_denormalize, ivn_infer_normalize,
                        ivn_train_normalize)
from .optim import Adam, cosine_lr
from .params import ParamStore, fnv1a64
from .rangecoder import SYMBOL_MIN, RangeDecoder, range_decode, range_encode
from .rng import Xoshiro256, derive_seed
from .toydata import IMAGE_SIZE, FeaturePyramid

PIXELS = IMAGE_SIZE * IMAGE_SIZE
FEATURE_SCALE = 255.0  # distortion measured in 8-bit code-value units


@dataclass
class LossReport:
    l_r: float     # rate, bits per image pixel
    l_p: float     # sum over levels of per-level MSE (8-bit units)
    l_mv: float    # l_r + lambda_p * l_p
    lambda_p: float
    bits_main: float
    bits_hyper: float


@dataclass
class EncodeInfo:
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    est_bits_main: float
    est_bits_hyper: float
    neg_log2_main: np.ndarray  # per-element bits of the main latent


class FeatureCodec:
    ARCH = "vfcn/v1 in32 y48x8x8 z32x4x4 ctx5x5 agg3 ur4"
    IN_CH = 32
    LATENT_CH = 48
    HYPER_CH = 32
    LATENT_SHAPE = (48, 8, 8)
    HYPER_SHAPE = (32, 4, 4)

    def __init__(self, seed: int = 0):
        ps = ParamStore()
        rng = Xoshiro256(derive_seed(seed, "vfcn-init"))
        c_in, c_y, c_z = self.IN_CH, self.LATENT_CH, self.HYPER_CH
        hyper_feat = 64

        self.dr1 = Conv2d(ps, "dr.conv1", c_in, c_y, 3, pad=1, rng=rng)
        self.dr2 = Conv2d(ps, "dr.conv2", c_y, c_y, 3, pad=1, rng=rng)
        self.dr3 = Conv2d(ps, "dr.conv3", c_y, c_y, 3, stride=2, pad=1, rng=rng)

        self.he1 = Conv2d(ps, "he.conv1", c_y, c_z, 3, pad=1, rng=rng)
        self.he2 = Conv2d(ps, "he.conv2", c_z, c_z, 3, stride=2, pad=1, rng=rng)

        self.hd1 = Deconv2d(ps, "hd.deconv1", c_z, c_y, 4, stride=2, pad=1, rng=rng)
        self.hd2 = Conv2d(ps, "hd.conv2", c_y, hyper_feat, 3, pad=1, rng=rng)

        self.context = ContextModel(ps, "ctx", c_y, hyper_feat, rng,
                                    ctx_ch=64, hidden=96)
        self.prior_z = FactorizedPrior(ps, "prior_z", c_z, rng)

        self.ur = {}
        self.ur[2] = self._ur_head(ps, "ur2", rng, up=True, down=0)
        self.ur[3] = self._ur_head(ps, "ur3", rng, up=False, down=0)
        self.ur[4] = self._ur_head(ps, "ur4", rng, up=False, down=1)
        self.ur[5] = self._ur_head(ps, "ur5", rng, up=False, down=2)

        ps.set_meta("arch_hash", float(fnv1a64(self.ARCH.encode()) % 2 ** 24))
        self.ps = ps

    def _ur_head(self, ps, name, rng, up: bool, down: int):
        c_y, c_out = self.LATENT_CH, self.IN_CH
        layers = [Conv2d(ps, f"{name}.conv1", c_y, c_y, 3,
                         stride=(2 if down >= 1 else 1), pad=1, rng=rng)]
        if up:
            layers.append(Deconv2d(ps, f"{name}.out", c_y, c_out, 4, stride=2,
                                   pad=1, rng=rng))
        else:
            layers.append(Conv2d(ps, f"{name}.out", c_y, c_out, 3,
                                 stride=(2 if down >= 2 else 1), pad=1, rng=rng))
        return layers

    # -- network pieces ------------------------------------------------------

    def _dr(self, x: Tensor) -> Tensor:
        h = self.dr1(x).leaky_relu(LEAKY_SLOPE)
        h = self.dr2(h).leaky_relu(LEAKY_SLOPE)
        return self.dr3(h)

    def _he(self, y: Tensor) -> Tensor:
        h = self.he1(y).leaky_relu(LEAKY_SLOPE)
        return self.he2(h)

    def _hyper_features(self, z_hat: Tensor) -> Tensor:
        h = self.hd1(z_hat).leaky_relu(LEAKY_SLOPE)
        return self.hd2(h).leaky_relu(LEAKY_SLOPE)

    def _restore(self, y_hat: Tensor) -> dict[int, Tensor]:
        out = {}
        for lvl, (conv1, conv2) in self.ur.items():
            h = conv1(y_hat).leaky_relu(LEAKY_SLOPE)
            out[lvl] = conv2(h)
        return out

    # -- training --------------------------------------------------------------

    def loss_batch(self, batch: list[FeaturePyramid], lambda_p: float,
                   noise_seed: int) -> tuple[Tensor, LossReport]:
        """Training objective with additive-noise quantization."""
        normalized, _ = ivn_train_normalize(batch)
        n = len(batch)
        p2 = tensor(np.stack([p.p2 for p in normalized]))
        targets = {lvl: tensor(np.stack([p.levels()[lvl - 2] for p in normalized]))
                   for lvl in (2, 3, 4, 5)}

        noise_rng = Xoshiro256(derive_seed(noise_seed, "quant-noise"))
        y = self._dr(p2)
        z = self._he(y)
        y_hat = quantize(y, QuantMode.ADDITIVE_NOISE, noise_rng)
        z_hat = quantize(z, QuantMode.ADDITIVE_NOISE, noise_rng)

        hyper = self._hyper_features(z_hat)
        mu, sigma = self.context.forward(y_hat, hyper)
        p_main = gaussian_likelihood(y_hat, mu, sigma)
        p_hyper = self.prior_z.likelihood(z_hat)
        bits_main = p_main.log().sum() * (-1.0 / math.log(2.0) / n)
        bits_hyper = p_hyper.log().sum() * (-1.0 / math.log(2.0) / n)
        l_r = (bits_main + bits_hyper) * (1.0 / PIXELS)

        recon = self._restore(y_hat)
        l_p = None
        for lvl in (2, 3, 4, 5):
            term = ad.mse(recon[lvl] * FEATURE_SCALE, targets[lvl] * FEATURE_SCALE)
            l_p = term if l_p is None else l_p + term
        loss = l_r + lambda_p * l_p
        report = LossReport(l_r=float(l_r.data), l_p=float(l_p.data),
                            l_mv=float(loss.data), lambda_p=lambda_p,
                            bits_main=float(bits_main.data),
                            bits_hyper=float(bits_hyper.data))
        return loss, report

    def train(self, dataset: list[FeaturePyramid], lambda_p: float, steps: int,
              lr: float = 1e-3, batch: int = 8, seed: int = 0, log=None
              ) -> list[float]:
        if not dataset:
            raise ContractError("cannot train the feature codec on an empty dataset")
        opt = Adam(self.ps.trainable(), lr=lr)
        order_rng = Xoshiro256(derive_seed(seed, "vfcn-batches"))
        history = []
        for step in range(steps):
            idx = order_rng.integers(len(dataset), batch)
            loss, report = self.loss_batch([dataset[i] for i in idx], lambda_p,
                                           noise_seed=derive_seed(seed, "vfcn-noise", step))
            if not np.isfinite(loss.data):
                raise ContractError(
                    f"training diverged at step {step}: loss={float(loss.data)}, "
                    f"rate={report.l_r:.3f} bpp, distortion={report.l_p:.3f}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(lr, step, steps))
            history.append(report.l_mv)
            if log is not None and (step % 200 == 0 or step == steps - 1):
                log(step, report)
        self.calibrate(dataset)
        self.ps.mark_trained()
        return history

    def calibrate(self, pyramids: list[FeaturePyramid]) -> None:
        c_min, c_max = calibrate_global_stats(pyramids)
        self.ps.set_meta("c_min", c_min)
        self.ps.set_meta("c_max", c_max)

    def norm_params(self, s: float) -> GlobalNormParams:
        c_min = self.ps.get_meta("c_min")
        c_max = self.ps.get_meta("c_max")
        if c_min is None or c_max is None:
            raise ContractError("codec is not calibrated (missing c_min/c_max)")
        return GlobalNormParams(c_min=float(c_min[0]), c_max=float(c_max[0]), s=s)

    # -- coding ----------------------------------------------------------------

    def encode(self, pyramid: FeaturePyramid, s: float) -> Bitstream:
        stream, _ = self.encode_with_info(pyramid, s)
        return stream

    def encode_with_info(self, pyramid: FeaturePyramid, s: float
                         ) -> tuple[Bitstream, EncodeInfo]:
        self.ps.require_trained("feature codec")
        pyramid.validate()
        norm = self.norm_params(s)
        pbar = ivn_infer_normalize(pyramid, norm)
        with no_grad():
            y = self._dr(tensor(pbar.p2[None]))
            z = self._he(y)
            y_hat = round_away(y.data[0])
            z_hat = round_away(z.data[0])
            hyper = self._hyper_features(tensor(z_hat[None])).data[0]

        z_syms = z_hat.reshape(-1).astype(np.int64)
        prov_z = self.prior_z.provider(self.HYPER_SHAPE)
        hyper_payload = range_encode(z_syms, prov_z)

        prov_y = GaussianContextProvider(self.context, hyper, self.LATENT_SHAPE)
        main_payload = range_encode(latent_to_symbols(y_hat), prov_y)

        stream = Bitstream(s=s, c_min=norm.c_min, c_max=norm.c_max,
                           image_size=(IMAGE_SIZE, IMAGE_SIZE),
                           latent_dims=self.LATENT_SHAPE,
                           hyper_payload=hyper_payload, main_payload=main_payload)
        nll_main = neg_log2_likelihood_np(y_hat, prov_y.mu_map, prov_y.sigma_map)
        info = EncodeInfo(
            y_hat=y_hat, z_hat=z_hat, mu=prov_y.mu_map, sigma=prov_y.sigma_map,
            est_bits_main=float(nll_main.sum()),
            est_bits_hyper=float(self.prior_z.estimate_bits_np(z_hat).sum()),
            neg_log2_main=nll_main)
        return stream, info

    def _check_stream(self, stream: Bitstream) -> None:
        if tuple(stream.latent_dims) != self.LATENT_SHAPE:
            raise ContractError(
                f"stream latent dims {stream.latent_dims} do not match this "
                f"architecture {self.LATENT_SHAPE}")

    def decode_latents(self, stream: Bitstream) -> tuple[np.ndarray, np.ndarray]:
        """Entropy-decode the hyper and main latents from a stream."""
        self.ps.require_trained("feature codec")
        self._check_stream(stream)
        prov_z = self.prior_z.provider(self.HYPER_SHAPE)
        z_syms = range_decode(stream.hyper_payload, prov_z,
                              int(np.prod(self.HYPER_SHAPE)))
        z_hat = z_syms.reshape(self.HYPER_SHAPE).astype(np.float64)
        with no_grad():
            hyper = self._hyper_features(tensor(z_hat[None])).data[0]
        prov_y = GaussianContextProvider(self.context, hyper, self.LATENT_SHAPE)
        y_syms = range_decode(stream.main_payload, prov_y,
                              int(np.prod(self.LATENT_SHAPE)))
        return z_hat, symbols_to_latent(y_syms, self.LATENT_SHAPE)

    def features_from_latent(self, y_hat: np.ndarray, stream: Bitstream
                             ) -> FeaturePyramid:
        with no_grad():
            recon = self._restore(tensor(y_hat[None]))
            tilde = FeaturePyramid(*[recon[lvl].data[0] for lvl in (2, 3, 4, 5)])
        norm = GlobalNormParams(c_min=stream.c_min, c_max=stream.c_max, s=stream.s)
        return ivdn_denormalize(tilde, norm)

    def decode(self, stream: Bitstream) -> FeaturePyramid:
        _, y_hat = self.decode_latents(stream)
        return self.features_from_latent(y_hat, stream)

    def roundtrip_features(self, pyramids: list[FeaturePyramid], s: float
                           ) -> list[FeaturePyramid]:
        """Round-quantized encode/decode without entropy coding (the coder is
        value-preserving, so decoded features are identical)."""
        self.ps.require_trained("feature codec")
        norm = self.norm_params(s)
        pbar = [ivn_infer_normalize(p, norm) for p in pyramids]
        with no_grad():
            y = self._dr(tensor(np.stack([p.p2 for p in pbar])))
            recon = self._restore(tensor(round_away(y.data)))
            levels = [recon[lvl].data for lvl in (2, 3, 4, 5)]
        out = []
        for i in range(len(pyramids)):
            tilde = FeaturePyramid(*[lv[i] for lv in levels])
            out.append(ivdn_denormalize(tilde, norm))
        return out

    def decode_reference(self, stream: Bitstream) -> FeaturePyramid:
        """Independent straightforward serial decoder (oracle for decode())."""
        self.ps.require_trained("feature codec")
        self._check_stream(stream)
        prov_z = self.prior_z.provider(self.HYPER_SHAPE)
        z_syms = range_decode(stream.hyper_payload, prov_z,
                              int(np.prod(self.HYPER_SHAPE)))
        z_hat = z_syms.reshape(self.HYPER_SHAPE).astype(np.float64)
        with no_grad():
            hyper = self._hyper_features(tensor(z_hat[None])).data[0]

        c, hgt, wid = self.LATENT_SHAPE
        y_partial = np.zeros(self.LATENT_SHAPE)
        dec = RangeDecoder(stream.main_payload)
        for i in range(hgt):
            for j in range(wid):
                tables, offsets, _, _ = build_position_tables(
                    self.context, y_partial, hyper, i, j)
                for ch in range(c):
                    cdf = tables[ch]
                    sym = dec.decode_symbol(cdf)
                    if sym < len(cdf) - 2:
                        val = sym + int(offsets[ch])
                    else:
                        val = dec.decode_raw16() + SYMBOL_MIN
                    y_partial[ch, i, j] = val
        return self.features_from_latent(y_partial, stream)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        self.ps.save(path)

    @classmethod
    def load(cls, path) -> "FeatureCodec":
        codec = cls()
        stored = ParamStore.load(path)
        expected = codec.ps.get_meta("arch_hash")
        got = stored.get_meta("arch_hash")
        if got is None or float(got[0]) != float(expected[0]):
            raise FormatError("architecture hash mismatch in codec model file")
        codec.ps.load_into(stored)
        return codec
