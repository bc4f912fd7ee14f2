import time

import numpy as np
import pytest

from fcmh.errors import ContractError, DecodeError
from fcmh.rangecoder import (P_FLOOR, TOTAL, PerPositionProvider, StaticProvider,
                             quantize_cdf, range_decode, range_encode)
from fcmh.rng import Xoshiro256


def zipf_pmf(k: int, a: float = 1.3) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1) ** a
    return w / w.sum()


class TestQuantizeCdf:
    def test_strictly_increasing_total_mass(self):
        rng = Xoshiro256(1)
        for trial in range(50):
            k = 2 + int(rng.integers(400, 1)[0])
            pmf = rng.uniform(k, low=1e-9, high=1.0)
            cdf = quantize_cdf(pmf)
            assert cdf[0] == 0
            assert cdf[-1] == TOTAL
            assert np.all(np.diff(cdf.astype(np.int64)) >= 1)

    def test_tiny_probabilities_get_floor(self):
        pmf = np.array([1.0] + [1e-30] * 10)
        cdf = quantize_cdf(pmf)
        assert np.all(np.diff(cdf.astype(np.int64)) >= 1)
        assert cdf[-1] == TOTAL


class TestRoundTrip:
    def test_empty_symbol_list(self):
        prov = StaticProvider(zipf_pmf(5), offset=0)
        data = range_encode(np.array([], dtype=np.int64), prov)
        out = range_decode(data, prov, 0)
        assert out.size == 0
        assert len(data) <= 8

    def test_single_symbol(self):
        prov = StaticProvider(zipf_pmf(3), offset=-1)
        data = range_encode(np.array([1]), prov)
        np.testing.assert_array_equal(range_decode(data, prov, 1), [1])

    def test_escape_symbols(self):
        prov = StaticProvider(zipf_pmf(4), offset=0)
        syms = np.array([0, 3, 700, -31000, 2, 32767, -32768])
        data = range_encode(syms, prov)
        np.testing.assert_array_equal(range_decode(data, prov, len(syms)), syms)

    def test_out_of_alphabet_raises(self):
        prov = StaticProvider(zipf_pmf(4), offset=0)
        with pytest.raises(ContractError):
            range_encode(np.array([40000]), prov)

    def test_fuzz_1000_latents_bit_exact_under_60s(self):
        rng = Xoshiro256(2024)
        t0 = time.time()
        for trial in range(1000):
            k = 2 + int(rng.integers(64, 1)[0])
            n = 1 + int(rng.integers(600, 1)[0])
            offset = int(rng.integers(200, 1)[0]) - 100
            pmf = rng.uniform(k, low=1e-6, high=1.0) ** 2
            if trial % 3 == 0:
                prov = StaticProvider(pmf, offset)
            else:
                tables = []
                offs = np.zeros(n, dtype=np.int64)
                for i in range(n):
                    kk = 2 + int(rng.integers(32, 1)[0])
                    p = rng.uniform(kk + 1, low=1e-6, high=1.0)
                    tables.append(quantize_cdf(p))
                    offs[i] = int(rng.integers(64, 1)[0]) - 32
                prov = PerPositionProvider(tables, offs)
                k = None
            if k is not None:
                syms = offset + rng.integers(k, n)
            else:
                syms = np.array([int(prov.offsets[i]) + int(rng.integers(len(prov.tables[i]) - 2, 1)[0])
                                 for i in range(n)])
            # sprinkle escapes
            if trial % 7 == 0 and n > 3:
                syms[::17] = -5000
            data = range_encode(syms, prov)
            out = range_decode(data, prov, n)
            np.testing.assert_array_equal(out, syms)
        assert time.time() - t0 < 60.0

    def test_corrupt_stream_fails_cleanly(self):
        prov = StaticProvider(zipf_pmf(16), offset=0)
        rng = Xoshiro256(3)
        syms = rng.integers(16, 500)
        data = bytearray(range_encode(syms, prov))
        data = data[: len(data) // 2]  # truncate
        with pytest.raises(DecodeError):
            range_decode(bytes(data), prov, 500)


class TestCompressionEfficiency:
    def test_zipf_length_near_entropy(self):
        rng = Xoshiro256(7)
        k, n = 64, 100_000
        pmf = zipf_pmf(k)
        cum = np.concatenate([[0.0], np.cumsum(pmf)])
        u = rng.uniform(n)
        syms = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, k - 1)
        counts = np.bincount(syms, minlength=k)
        emp = counts / n
        nz = emp > 0
        empirical_entropy_bits = float(-(counts[nz] * np.log2(emp[nz])).sum())
        prov = StaticProvider(emp, offset=0)
        data = range_encode(syms, prov)
        np.testing.assert_array_equal(range_decode(data, prov, n), syms)
        assert len(data) * 8 <= empirical_entropy_bits + 0.02 * n + 64

    def test_near_certain_symbol_much_shorter_than_n_bits(self):
        n, k = 20_000, 8
        pmf = np.full(k, P_FLOOR)
        pmf[2] = 1.0 - P_FLOOR * (k - 1)
        prov = StaticProvider(pmf, offset=0)
        syms = np.full(n, 2)
        data = range_encode(syms, prov)
        expected_bits = -n * np.log2(pmf[2] / (1.0 + P_FLOOR))
        assert len(data) * 8 < expected_bits + 128
        assert len(data) * 8 < 0.01 * n
        np.testing.assert_array_equal(range_decode(data, prov, n), syms)
