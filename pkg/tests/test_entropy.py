import numpy as np
import pytest

from fcmh import autodiff as ad
from fcmh.autodiff import grad_check, tensor
from fcmh.entropy import (ContextModel, FactorizedPrior, GaussianContextProvider,
                          gaussian_bin_pmf_np,
                          QuantMode, gaussian_likelihood, latent_to_symbols,
                          quantize, quantize_cdf_batch, round_away,
                          symbols_to_latent)
from fcmh.errors import ContractError
from fcmh.params import ParamStore
from fcmh.rangecoder import TOTAL, P_FLOOR, range_decode, range_encode
from fcmh.rng import Xoshiro256


class TestQuantize:
    def test_round_ties_away_from_zero(self):
        x = tensor(np.array([0.4, -1.5, 1.5, 0.5, -0.5, 2.49]))
        got = quantize(x, QuantMode.ROUND).data
        np.testing.assert_array_equal(got, [0.0, -2.0, 2.0, 1.0, -1.0, 2.0])

    def test_noise_support_bound(self):
        rng = Xoshiro256(1)
        y = tensor(rng.normal(1000))
        q = quantize(y, QuantMode.ADDITIVE_NOISE, Xoshiro256(2))
        assert np.all(np.abs(q.data - y.data) <= 0.5)

    def test_noise_mean_monte_carlo(self):
        rng = Xoshiro256(3)
        q = quantize(tensor(np.zeros(10 ** 6)), QuantMode.ADDITIVE_NOISE, rng)
        assert abs(float(q.data.mean())) < 2e-3

    def test_round_rejected_on_grad_path(self):
        y = tensor(np.ones(4), requires_grad=True)
        with pytest.raises(ContractError):
            quantize(y * 2.0, QuantMode.ROUND)

    def test_noise_requires_rng(self):
        with pytest.raises(ContractError):
            quantize(tensor(np.ones(4)), QuantMode.ADDITIVE_NOISE)


class TestGaussianLikelihood:
    def test_center_bin_value(self):
        p = gaussian_likelihood(tensor(np.zeros(1)), tensor(np.zeros(1)),
                                tensor(np.ones(1)))
        np.testing.assert_allclose(p.data, [0.3829249225480263], atol=1e-12)

    def test_symmetry(self):
        ks = tensor(np.arange(-5.0, 6.0))
        p = gaussian_likelihood(ks, tensor(np.zeros(11)), tensor(np.full(11, 1.7)))
        np.testing.assert_allclose(p.data, p.data[::-1], atol=1e-15)

    def test_total_mass_sums_to_one(self):
        ks = np.arange(-30.0, 31.0)
        p = gaussian_bin_pmf_np(ks, np.zeros(61), np.ones(61))
        assert abs(float(p.sum()) - 1.0) < 1e-9
        # the clamped variant only adds mass at the floor
        pc = gaussian_likelihood(tensor(ks), tensor(np.zeros(61)), tensor(np.ones(61)))
        assert np.all(pc.data >= p - 1e-15)

    def test_floor_clamp(self):
        p = gaussian_likelihood(tensor(np.array([200.0])), tensor(np.zeros(1)),
                                tensor(np.full(1, 0.11)))
        assert float(p.data[0]) == P_FLOOR


class TestFactorizedPrior:
    def _make(self, channels=4, seed=0):
        ps = ParamStore()
        prior = FactorizedPrior(ps, "prior", channels, Xoshiro256(seed))
        return ps, prior

    def test_cdf_tails_and_monotonicity(self):
        _, prior = self._make()
        grid = np.linspace(-30.0, 30.0, 121).reshape(1, -1)
        grid = np.broadcast_to(grid, (4, 121)).copy()
        cdf = prior._cdf_np(grid)
        assert np.all(np.diff(cdf, axis=1) >= -1e-12)
        lo = prior._cdf_np(np.full((4, 1), -1e4))
        hi = prior._cdf_np(np.full((4, 1), 1e4))
        assert np.all(lo < 1e-6) and np.all(hi > 1.0 - 1e-6)

    def test_likelihood_floor_and_shape(self):
        _, prior = self._make()
        y = tensor(np.zeros((2, 4, 3, 3)))
        p = prior.likelihood(y)
        assert p.shape == (2, 4, 3, 3)
        assert np.all(p.data >= P_FLOOR)

    def test_likelihood_grads(self):
        ps, prior = self._make(channels=2, seed=1)
        rng = Xoshiro256(5)
        y = tensor(rng.normal((1, 2, 2, 2)) * 3.0)

        def f(w):
            return prior.likelihood(y).log().sum() * -1.0

        w0 = prior.weights[0]
        err = grad_check(lambda _w: f(None), w0, h=1e-6, max_coords=6)
        assert err < 1e-6

    def test_roundtrip_through_coder(self):
        _, prior = self._make(channels=3, seed=2)
        rng = Xoshiro256(9)
        y = round_away(rng.normal((3, 6, 6)) * 4.0)
        prov = prior.provider(y.shape)
        syms = y.reshape(-1).astype(np.int64)
        data = range_encode(syms, prov)
        out = range_decode(data, prior.provider(y.shape), syms.size)
        np.testing.assert_array_equal(out, syms)

    def test_coded_length_tracks_estimate(self):
        _, prior = self._make(channels=8, seed=3)
        rng = Xoshiro256(10)
        y = round_away(rng.normal((8, 24, 24)) * 5.0)
        bits_est = float(prior.estimate_bits_np(y).sum())
        prov = prior.provider(y.shape)
        data = range_encode(y.reshape(-1).astype(np.int64), prov)
        actual = len(data) * 8
        assert abs(actual - bits_est) <= 0.02 * bits_est + 64


class TestContextModel:
    def _make(self, c=6, hyper_c=8, seed=0):
        ps = ParamStore()
        cm = ContextModel(ps, "ctx", c, hyper_c, Xoshiro256(seed))
        return ps, cm

    def test_zero_inputs_bias_determined(self):
        _, cm = self._make()
        y = tensor(np.zeros((1, 6, 8, 8)))
        hyper = tensor(np.zeros((1, 8, 8, 8)))
        mu, sigma = cm.forward(y, hyper)
        for arr in (mu.data, sigma.data):
            flat = arr[0].reshape(arr.shape[1], -1)
            np.testing.assert_allclose(flat - flat[:, :1], 0.0, atol=1e-12)

    def test_causality(self):
        rng = Xoshiro256(4)
        _, cm = self._make()
        y0 = rng.normal((1, 6, 8, 8))
        hyper = tensor(rng.normal((1, 8, 8, 8)))
        mu0, _ = cm.forward(tensor(y0), hyper)
        y1 = y0.copy()
        y1[0, :, 4, 4] += 3.0
        mu1, _ = cm.forward(tensor(y1), hyper)
        flat0 = mu0.data[0].transpose(1, 2, 0).reshape(-1, 6)
        flat1 = mu1.data[0].transpose(1, 2, 0).reshape(-1, 6)
        pos = 4 * 8 + 4
        np.testing.assert_array_equal(flat0[:pos + 1], flat1[:pos + 1])
        assert not np.allclose(flat0[pos + 1:], flat1[pos + 1:])

    def test_pointwise_matches_masked_forward(self):
        rng = Xoshiro256(6)
        _, cm = self._make()
        y = rng.normal((6, 8, 8)) * 2.0
        hyper_np = rng.normal((8, 8, 8))
        mu_full, sig_full = cm.forward(tensor(y[None]), tensor(hyper_np[None]))
        for (i, j) in [(0, 0), (3, 5), (7, 7)]:
            mu, sig = cm.predict_position(y, hyper_np, i, j)
            np.testing.assert_allclose(mu, mu_full.data[0, :, i, j], atol=1e-9)
            np.testing.assert_allclose(sig, sig_full.data[0, :, i, j], atol=1e-9)

    def test_serial_roundtrip_bit_exact(self):
        rng = Xoshiro256(7)
        _, cm = self._make()
        shape = (6, 8, 8)
        y = round_away(rng.normal(shape) * 6.0)
        hyper_np = rng.normal((8, 8, 8))
        syms = latent_to_symbols(y)
        prov = GaussianContextProvider(cm, hyper_np, shape)
        data = range_encode(syms, prov)
        prov2 = GaussianContextProvider(cm, hyper_np, shape)
        out = range_decode(data, prov2, syms.size)
        np.testing.assert_array_equal(out, syms)
        np.testing.assert_array_equal(symbols_to_latent(out, shape), y)

    def test_symbol_layout_roundtrip(self):
        rng = Xoshiro256(8)
        y = round_away(rng.normal((3, 4, 5)) * 2.0)
        np.testing.assert_array_equal(symbols_to_latent(latent_to_symbols(y), (3, 4, 5)), y)


class TestQuantizeCdfBatch:
    def test_rows_valid(self):
        rng = Xoshiro256(11)
        pmf = rng.uniform((50, 33), low=1e-9, high=1.0)
        cdf = quantize_cdf_batch(pmf)
        assert np.all(cdf[:, 0] == 0)
        assert np.all(cdf[:, -1] == TOTAL)
        assert np.all(np.diff(cdf.astype(np.int64), axis=1) >= 1)
