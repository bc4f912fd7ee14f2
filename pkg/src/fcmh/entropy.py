"""Learned entropy models: quantization, a trainable factorized prior, the
conditional Gaussian model, and the causal context predictor.

Training replaces rounding with additive uniform noise so rates stay
differentiable; coding uses true rounding plus quantized CDF tables. The
per-position prediction path used while building coding tables is shared
verbatim between encoder and decoder, which is what makes the serial context
decode bit-exact.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy.special import erf as _np_erf

from . import autodiff as ad
from .autodiff import Tensor, no_grad, tensor
from .errors import ContractError
from .layers import LEAKY_SLOPE, Conv2d, MaskedConv2d, kaiming
from .params import ParamStore
from .rangecoder import TOTAL, P_FLOOR, quantize_cdf
from .rng import Xoshiro256

SIGMA_MIN = 0.11
LOG2 = math.log(2.0)


class QuantMode(Enum):
    ADDITIVE_NOISE = "additive_noise"  # training only
    ROUND = "round"                    # inference only


def round_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y: Tensor, mode: QuantMode, rng: Xoshiro256 | None = None) -> Tensor:
    if mode is QuantMode.ROUND:
        if ad.grad_enabled() and y.requires_grad:
            raise ContractError("Round quantization cannot be used on the gradient path")
        return tensor(round_away(y.data))
    if rng is None:
        raise ContractError("additive-noise quantization needs a seeded rng")
    noise = rng.uniform(y.shape, low=-0.5, high=0.5)
    return y + tensor(noise)


# -- Gaussian conditional ----------------------------------------------------


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Integer-bin mass under N(mu, sigma^2), clamped at the coder floor."""
    inv = sigma.pow(-1.0)
    up = ((y_hat - mu) + 0.5) * inv
    lo = ((y_hat - mu) - 0.5) * inv
    p = up.normal_cdf() - lo.normal_cdf()
    return p.clamp_min(P_FLOOR)


def gaussian_bin_pmf_np(centers: np.ndarray, mu: np.ndarray,
                        sigma: np.ndarray) -> np.ndarray:
    """Vectorized bin masses at integer `centers` (numpy, coding path)."""
    up = 0.5 * (1.0 + _np_erf((centers + 0.5 - mu) / (sigma * math.sqrt(2.0))))
    lo = 0.5 * (1.0 + _np_erf((centers - 0.5 - mu) / (sigma * math.sqrt(2.0))))
    return up - lo


def neg_log2_likelihood_np(y_hat: np.ndarray, mu: np.ndarray,
                           sigma: np.ndarray) -> np.ndarray:
    p = np.maximum(gaussian_bin_pmf_np(y_hat, mu, sigma), P_FLOOR)
    return -np.log2(p)


def quantize_cdf_batch(pmf: np.ndarray) -> np.ndarray:
    """Row-wise quantize_cdf for a (M, K) batch of probability vectors."""
    pmf = np.maximum(pmf, 1e-12)
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    freq = np.maximum(np.floor(pmf * TOTAL).astype(np.int64), 1)
    diff = TOTAL - freq.sum(axis=1)
    over = diff > 0
    if np.any(over):
        rows = np.nonzero(over)[0]
        cols = np.argmax(pmf[rows], axis=1)
        freq[rows, cols] += diff[rows]
    under = diff < 0
    if np.any(under):
        for r in np.nonzero(under)[0]:
            deficit = -int(diff[r])
            while deficit > 0:
                c = int(np.argmax(freq[r]))
                take = min(int(freq[r, c]) - 1, deficit)
                freq[r, c] -= take
                deficit -= take
    cdf = np.zeros((pmf.shape[0], pmf.shape[1] + 1), dtype=np.uint32)
    cdf[:, 1:] = np.cumsum(freq, axis=1)
    return cdf


# -- factorized prior ---------------------------------------------------------


class FactorizedPrior:
    """Per-channel monotone CDF built from a stack of 1-D affine layers.

    Each channel's cumulative is sigmoid(f_K(...f_1(x))) with softplus-positive
    weights and bounded tanh mixing factors, so monotonicity holds by
    construction and the tails reach exactly 0 and 1.
    """

    def __init__(self, ps: ParamStore, name: str, channels: int,
                 rng: Xoshiro256, filters: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0):
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.factors: list[Tensor | None] = []
        for k in range(len(dims) - 1):
            d_in, d_out = dims[k], dims[k + 1]
            w0 = np.full((channels, d_out, d_in), math.log(math.expm1(1.0 / scale / d_out)))
            b0 = rng.uniform((channels, d_out, 1), low=-0.5, high=0.5)
            self.weights.append(ps.register(f"{name}.w{k}", Tensor(w0, requires_grad=True)))
            self.biases.append(ps.register(f"{name}.b{k}", Tensor(b0, requires_grad=True)))
            if k < len(dims) - 2:
                a0 = np.zeros((channels, d_out, 1))
                self.factors.append(
                    ps.register(f"{name}.a{k}", Tensor(a0, requires_grad=True)))
            else:
                self.factors.append(None)

    def _logits(self, x: Tensor) -> Tensor:
        """Logit of the cumulative for x shaped (C, 1, N)."""
        h = x
        for w, b, a in zip(self.weights, self.biases, self.factors):
            h = ad.channel_affine(h, w.softplus(), b)
            if a is not None:
                h = h + ad.channel_scale(h.tanh(), a.tanh())
        return h

    def cdf(self, x: Tensor) -> Tensor:
        return self._logits(x).sigmoid()

    def likelihood(self, y_hat: Tensor) -> Tensor:
        """Integer-bin mass for y_hat shaped (N, C, H, W), floor-clamped."""
        n, c, h, w = y_hat.shape
        if c != self.channels:
            raise ContractError(f"expected {self.channels} channels, got {c}")
        flat = y_hat.transpose((1, 0, 2, 3)).reshape((c, 1, n * h * w))
        up = self._logits(flat + 0.5)
        lo = self._logits(flat - 0.5)
        # evaluate differences on the better-conditioned sigmoid tail
        sign = tensor(-np.sign(up.data + lo.data))
        p = ((up * sign).sigmoid() - (lo * sign).sigmoid()).abs()
        p = p.reshape((c, n, h, w)).transpose((1, 0, 2, 3))
        return p.clamp_min(P_FLOOR)

    # -- coding ------------------------------------------------------------

    def _cdf_np(self, grid: np.ndarray) -> np.ndarray:
        """Cumulative at (C, M) grid points, numpy path for table building."""
        with no_grad():
            t = self.cdf(tensor(grid.reshape(self.channels, 1, -1)))
        return t.data.reshape(self.channels, -1)

    def coding_tables(self, tail_mass: float = 2.0 ** -10,
                      max_half_width: int = 4096) -> tuple[list[np.ndarray], np.ndarray]:
        """Quantized per-channel CDF tables and their window offsets."""
        half = 8
        while half < max_half_width:
            grid = np.arange(-half, half + 1, dtype=np.float64)
            edges = np.broadcast_to(grid, (self.channels, grid.size))
            lo_mass = self._cdf_np(edges[:, :1] - 0.5)
            hi_mass = self._cdf_np(edges[:, -1:] + 0.5)
            if np.all(lo_mass < tail_mass) and np.all(hi_mass > 1.0 - tail_mass):
                break
            half *= 2
        grid = np.arange(-half, half + 1, dtype=np.float64)
        edges = np.broadcast_to(grid, (self.channels, grid.size)).copy()
        c_up = self._cdf_np(edges + 0.5)
        c_lo = self._cdf_np(edges - 0.5)
        pmf = np.maximum(c_up - c_lo, 0.0)
        cum = np.cumsum(pmf, axis=1)
        tables: list[np.ndarray] = []
        offsets = np.zeros(self.channels, dtype=np.int64)
        for c in range(self.channels):
            first = int(np.searchsorted(cum[c], tail_mass * 0.5))
            last = int(np.searchsorted(cum[c], cum[c, -1] - tail_mass * 0.5))
            last = min(max(last, first), grid.size - 1)
            window = pmf[c, first:last + 1]
            escape = max(1.0 - float(window.sum()), P_FLOOR)
            tables.append(quantize_cdf(np.concatenate([window, [escape]])))
            offsets[c] = int(grid[first])
        return tables, offsets

    def provider(self, shape: tuple[int, int, int]) -> "FactorizedProvider":
        tables, offsets = self.coding_tables()
        return FactorizedProvider(tables, offsets, shape)

    def estimate_bits_np(self, y_hat: np.ndarray) -> np.ndarray:
        """Per-element -log2 likelihood of an integer-valued (C, H, W) latent."""
        c, h, w = y_hat.shape
        with no_grad():
            p = self.likelihood(tensor(y_hat[None]))
        return -np.log2(p.data[0])


class FactorizedProvider:
    """Per-channel tables addressed by raster position within (C, H, W)."""

    def __init__(self, tables: list[np.ndarray], offsets: np.ndarray,
                 shape: tuple[int, int, int]):
        self.tables = tables
        self.offsets = offsets
        c, h, w = shape
        self.plane = h * w

    def cdf(self, i: int, prefix: np.ndarray):
        c = i // self.plane
        return self.tables[c], int(self.offsets[c])


# -- autoregressive context model ---------------------------------------------


class ContextModel:
    """Masked 5x5 context conv fused with hyper features by 1x1 convs.

    `forward` is the differentiable whole-tensor path used in training;
    `predict_position` is the numpy path both coder sides share, evaluated one
    raster position at a time.
    """

    KERNEL = 5

    def __init__(self, ps: ParamStore, name: str, latent_ch: int, hyper_ch: int,
                 rng: Xoshiro256, ctx_ch: int | None = None,
                 hidden: int | None = None):
        self.latent_ch = latent_ch
        self.hyper_ch = hyper_ch
        ctx_ch = ctx_ch or 2 * latent_ch
        hidden = hidden or 2 * latent_ch
        self.masked = MaskedConv2d(ps, f"{name}.ctx", latent_ch, ctx_ch,
                                   self.KERNEL, rng)
        self.agg1 = Conv2d(ps, f"{name}.agg1", hyper_ch + ctx_ch, hidden, 1, rng=rng)
        self.agg2 = Conv2d(ps, f"{name}.agg2", hidden, hidden, 1, rng=rng)
        self.agg3 = Conv2d(ps, f"{name}.agg3", hidden, 2 * latent_ch, 1, rng=rng)

    def forward(self, y_hat: Tensor, hyper: Tensor) -> tuple[Tensor, Tensor]:
        ctx = self.masked(y_hat)
        h = ad.concat([hyper, ctx], axis=1)
        h = self.agg1(h).leaky_relu(LEAKY_SLOPE)
        h = self.agg2(h).leaky_relu(LEAKY_SLOPE)
        out = self.agg3(h)
        mu = out.slice_axis(1, 0, self.latent_ch)
        sigma = out.slice_axis(1, self.latent_ch, 2 * self.latent_ch)
        return mu, SIGMA_MIN + sigma.softplus()

    # -- shared pointwise coding path ---------------------------------------

    def predict_position(self, y_partial: np.ndarray, hyper: np.ndarray,
                         i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) for all channels at one spatial position.

        `y_partial` may contain garbage at (i, j) and later raster positions;
        the causal mask ignores them.
        """
        k = self.KERNEL
        pad = k // 2
        c, hgt, wid = y_partial.shape
        patch = np.zeros((c, k, k))
        for dy in range(k):
            yy = i + dy - pad
            if yy < 0 or yy >= hgt:
                continue
            x0, x1 = max(0, j - pad), min(wid, j + pad + 1)
            patch[:, dy, x0 - (j - pad):x1 - (j - pad)] = y_partial[:, yy, x0:x1]
        w = self.masked.w.data * self.masked.mask.data
        ctx = w.reshape(w.shape[0], -1) @ patch.reshape(-1) + self.masked.b.data
        vec = np.concatenate([hyper[:, i, j], ctx])
        vec = self._mv(self.agg1, vec, leaky=True)
        vec = self._mv(self.agg2, vec, leaky=True)
        vec = self._mv(self.agg3, vec, leaky=False)
        mu = vec[:self.latent_ch]
        sigma = SIGMA_MIN + np.logaddexp(0.0, vec[self.latent_ch:])
        return mu, sigma

    @staticmethod
    def _mv(layer: Conv2d, vec: np.ndarray, leaky: bool) -> np.ndarray:
        out = layer.w.data.reshape(layer.w.data.shape[0], -1) @ vec + layer.b.data
        if leaky:
            out = np.where(out > 0.0, out, LEAKY_SLOPE * out)
        return out


MAX_HALF_WIDTH = 2048


def build_position_tables(model: ContextModel, y_partial: np.ndarray,
                          hyper: np.ndarray, i: int, j: int
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Quantized per-channel CDF tables for one position of a context-coded
    latent. Shared by the encoder, the decoder, and the reference decoder so
    that all three derive identical tables from identical state."""
    mu, sigma = model.predict_position(y_partial, hyper, i, j)
    centers = round_away(mu).astype(np.int64)
    half = int(min(max(math.ceil(6.0 * float(sigma.max())) + 1, 2), MAX_HALF_WIDTH))
    grid = np.arange(-half, half + 1, dtype=np.float64)
    bins = (centers[:, None] + grid[None, :]).astype(np.float64)
    pmf = gaussian_bin_pmf_np(bins, mu[:, None], sigma[:, None])
    escape = np.maximum(1.0 - pmf.sum(axis=1, keepdims=True), P_FLOOR)
    cdfs = quantize_cdf_batch(np.concatenate([pmf, escape], axis=1))
    return cdfs, centers - half, mu, sigma


class GaussianContextProvider:
    """Serial CDF provider for a context-modeled latent.

    Symbol order is raster over spatial positions with channels innermost.
    Tables for a position are built once from the shared pointwise predictor;
    mu/sigma maps are retained so the encoder can report rate estimates and
    bit-allocation maps consistent with the actual coding distributions.
    """

    def __init__(self, model: ContextModel, hyper: np.ndarray,
                 shape: tuple[int, int, int]):
        self.model = model
        self.hyper = hyper
        self.shape = shape
        c, h, w = shape
        self.y_partial = np.zeros(shape)
        self.mu_map = np.zeros(shape)
        self.sigma_map = np.ones(shape)
        self._pos = -1
        self._tables: np.ndarray | None = None
        self._offsets = np.zeros(c, dtype=np.int64)

    def _build_position(self, pos: int, prefix: np.ndarray):
        c, hgt, wid = self.shape
        if pos > 0:
            prev = pos - 1
            pi, pj = divmod(prev, wid)
            self.y_partial[:, pi, pj] = prefix[prev * c:(prev + 1) * c]
        i, j = divmod(pos, wid)
        self._tables, self._offsets, mu, sigma = build_position_tables(
            self.model, self.y_partial, self.hyper, i, j)
        self.mu_map[:, i, j] = mu
        self.sigma_map[:, i, j] = sigma
        self._pos = pos

    def cdf(self, i: int, prefix: np.ndarray):
        c = self.shape[0]
        pos, ch = divmod(i, c)
        if pos != self._pos:
            self._build_position(pos, prefix)
        return self._tables[ch], int(self._offsets[ch])


def latent_to_symbols(y_hat: np.ndarray) -> np.ndarray:
    """(C, H, W) integer latent -> flat symbols, channels innermost."""
    return y_hat.transpose(1, 2, 0).reshape(-1).astype(np.int64)


def symbols_to_latent(symbols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    return symbols.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64)
