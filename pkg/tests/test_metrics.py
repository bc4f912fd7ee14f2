import numpy as np
import pytest

from fcmh.errors import ContractError
from fcmh.metrics import (RateQualityCurve, alloc_map_to_pgm, bd_metric,
                          bd_quality, bd_rate, bit_allocation_map,
                          curves_from_csv, curves_to_csv, ms_ssim, psnr)
from fcmh.rng import Xoshiro256


def make_curve(label, bpps, metrics):
    return RateQualityCurve(label, list(zip(bpps, metrics)))


ANCHOR = make_curve("anchor", [0.2, 0.4, 0.8, 1.6], [30.0, 33.0, 36.0, 39.0])


class TestBdMetric:
    def test_identity_zero(self):
        assert bd_rate(ANCHOR, ANCHOR) == pytest.approx(0.0, abs=1e-9)
        assert bd_quality(ANCHOR, ANCHOR) == pytest.approx(0.0, abs=1e-12)

    def test_half_rate_fixture(self):
        half = make_curve("half", [0.1, 0.2, 0.4, 0.8], [30.0, 33.0, 36.0, 39.0])
        assert bd_rate(ANCHOR, half) == pytest.approx(-50.0, abs=0.01)

    def test_bd_quality_antisymmetric(self):
        rng = Xoshiro256(1)
        for trial in range(20):
            b1 = np.sort(rng.uniform(4, 0.1, 2.0))
            b2 = np.sort(rng.uniform(4, 0.1, 2.0))
            m1 = np.sort(rng.uniform(4, 20, 40))
            m2 = np.sort(rng.uniform(4, 20, 40))
            a = make_curve("a", b1, m1)
            b = make_curve("b", b2, m2)
            try:
                ab = bd_quality(a, b)
                ba = bd_quality(b, a)
            except ContractError:
                continue
            assert abs(ab + ba) < 1e-9

    def test_bd_rate_scale_invariance(self):
        test = make_curve("t", [0.15, 0.33, 0.7, 1.4], [30.5, 33.5, 36.5, 39.5])
        base = bd_rate(ANCHOR, test)
        for k in (0.25, 3.0, 17.0):
            a2 = make_curve("a", ANCHOR.bpp * k, ANCHOR.metric)
            t2 = make_curve("t", test.bpp * k, test.metric)
            assert bd_rate(a2, t2) == pytest.approx(base, abs=1e-9)

    def test_matches_trapezoid_oracle(self):
        rng = Xoshiro256(7)
        checked = 0
        for trial in range(100):
            bpp_a = 0.15 * 2.0 ** np.cumsum(rng.uniform(4, 0.5, 1.5))
            met_a = 28.0 + np.cumsum(rng.uniform(4, 0.8, 3.0))
            bpp_t = np.sort(bpp_a * rng.uniform(4, 0.7, 1.3))
            met_t = 28.0 + np.cumsum(rng.uniform(4, 0.8, 3.0))
            a = make_curve("a", bpp_a, met_a)
            t = make_curve("t", bpp_t, met_t)
            lo = max(a.metric.min(), t.metric.min())
            hi = min(a.metric.max(), t.metric.max())
            if hi <= lo:
                continue
            got = bd_rate(a, t)
            # oracle: dense trapezoid integration of the same cubic fits
            pa = np.polyfit(a.metric, np.log10(a.bpp), 3)
            pt = np.polyfit(t.metric, np.log10(t.bpp), 3)
            xs = np.linspace(lo, hi, 10_000)
            delta = (np.trapezoid(np.polyval(pt, xs), xs)
                     - np.trapezoid(np.polyval(pa, xs), xs)) / (hi - lo)
            want = (10.0 ** delta - 1.0) * 100.0
            assert abs(got - want) <= 0.5
            checked += 1
        assert checked >= 50

    def test_too_few_points(self):
        short = make_curve("s", [0.2, 0.4, 0.8], [30.0, 33.0, 36.0])
        with pytest.raises(ContractError):
            bd_rate(ANCHOR, short)

    def test_no_overlap_error(self):
        far = make_curve("f", [0.2, 0.4, 0.8, 1.6], [50.0, 52.0, 54.0, 56.0])
        with pytest.raises(ContractError):
            bd_rate(ANCHOR, far)

    def test_non_monotone_warns_but_proceeds(self):
        wobble = make_curve("w", [0.2, 0.4, 0.8, 1.6], [30.0, 34.0, 33.0, 39.0])
        with pytest.warns(UserWarning):
            bd_metric(ANCHOR, wobble, "bd_rate")


class TestCurveCsv:
    def test_roundtrip(self):
        curves = [ANCHOR, make_curve("x", [0.3, 0.6], [1.0, 2.0])]
        text = curves_to_csv(curves, comment="config_hash=abc")
        back = curves_from_csv(text)
        assert [c.label for c in back] == ["anchor", "x"]
        np.testing.assert_allclose(back[0].bpp, ANCHOR.bpp)
        np.testing.assert_allclose(back[0].metric, ANCHOR.metric)

    def test_positive_bpp_enforced(self):
        with pytest.raises(ContractError):
            make_curve("bad", [0.0, 0.4, 0.8, 1.6], [1, 2, 3, 4])


class TestBitAllocationMap:
    def test_uniform_half_probability(self):
        bits = np.full((16, 8, 8), 1.0)  # -log2(0.5) everywhere
        m = bit_allocation_map(bits)
        np.testing.assert_allclose(m, 1.0)

    def test_sum_consistency(self):
        rng = Xoshiro256(3)
        bits = rng.uniform((32, 8, 8), 0.01, 8.0)
        m = bit_allocation_map(bits)
        assert abs(m.sum() * 32 - bits.sum()) < 1e-9

    def test_pgm_header(self):
        text = alloc_map_to_pgm(np.arange(12.0).reshape(3, 4))
        lines = text.splitlines()
        assert lines[0] == "P2" and lines[1] == "4 3" and lines[2] == "255"


class TestImageQuality:
    def test_psnr_identical_capped(self):
        x = Xoshiro256(1).uniform((3, 16, 16))
        assert psnr(x, x) == 99.0

    def test_psnr_known_8bit_mse(self):
        a = np.zeros((16, 16))
        b = np.ones((16, 16))  # MSE = 1 in 8-bit units
        assert psnr(a, b, data_range=255.0) == pytest.approx(48.1308, abs=1e-3)

    def test_msssim_self_is_one(self):
        x = Xoshiro256(2).uniform((3, 64, 64))
        assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_msssim_orders_degradations(self):
        rng = Xoshiro256(3)
        x = rng.uniform((3, 64, 64))
        mild = np.clip(x + 0.02 * rng.normal(x.shape), 0, 1)
        harsh = np.clip(x + 0.2 * rng.normal(x.shape), 0, 1)
        assert ms_ssim(x, harsh) < ms_ssim(x, mild) < 1.0
