"""Rate-quality curves, Bjontegaard deltas, bit-allocation maps, PSNR/MS-SSIM."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

MetricKind = str  # "accuracy" | "psnr" | "msssim"


@dataclass
class RateQualityCurve:
    label: str
    points: list[tuple[float, float]]  # (bpp, metric), sorted by bpp
    metric_kind: MetricKind = "accuracy"

    def __post_init__(self):
        if any(bpp <= 0.0 for bpp, _ in self.points):
            raise ContractError("bpp values must be strictly positive")
        self.points = sorted(self.points)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def metric(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def _check_bd_inputs(anchor: RateQualityCurve, test: RateQualityCurve) -> None:
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ContractError(
                f"curve '{curve.label}' needs >= 4 points for BD computation")
        if np.any(np.diff(curve.metric) < 0):
            warnings.warn(f"curve '{curve.label}' is not monotone in rate")


def _poly_mean(coeffs: np.ndarray, lo: float, hi: float) -> float:
    anti = np.polyint(coeffs)
    return (np.polyval(anti, hi) - np.polyval(anti, lo)) / (hi - lo)


def bd_rate(anchor: RateQualityCurve, test: RateQualityCurve) -> float:
    """Average rate change of `test` vs `anchor`, percent (negative = savings).

    Classic Bjontegaard: cubic fit of log10(bpp) against the quality metric,
    integrated over the overlapping quality range.
    """
    _check_bd_inputs(anchor, test)
    lo = max(anchor.metric.min(), test.metric.min())
    hi = min(anchor.metric.max(), test.metric.max())
    if hi <= lo:
        raise ContractError("curves have no overlapping quality range")
    pa = np.polyfit(anchor.metric, np.log10(anchor.bpp), 3)
    pt = np.polyfit(test.metric, np.log10(test.bpp), 3)
    delta = _poly_mean(pt, lo, hi) - _poly_mean(pa, lo, hi)
    return (10.0 ** delta - 1.0) * 100.0


def bd_quality(anchor: RateQualityCurve, test: RateQualityCurve) -> float:
    """Average quality change of `test` vs `anchor` over the shared rate range."""
    _check_bd_inputs(anchor, test)
    la, lt = np.log10(anchor.bpp), np.log10(test.bpp)
    lo = max(la.min(), lt.min())
    hi = min(la.max(), lt.max())
    if hi <= lo:
        raise ContractError("curves have no overlapping rate range")
    pa = np.polyfit(la, anchor.metric, 3)
    pt = np.polyfit(lt, test.metric, 3)
    return _poly_mean(pt, lo, hi) - _poly_mean(pa, lo, hi)


def bd_metric(anchor: RateQualityCurve, test: RateQualityCurve,
              mode: str) -> float:
    if mode == "bd_rate":
        return bd_rate(anchor, test)
    if mode == "bd_quality":
        return bd_quality(anchor, test)
    raise ContractError(f"unknown BD mode: {mode}")


# -- curve CSV io -----------------------------------------------------------


def curves_to_csv(curves: list[RateQualityCurve], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write("label,bpp,metric\n")
    for curve in curves:
        for bpp, metric in curve.points:
            buf.write(f"{curve.label},{bpp:.10g},{metric:.10g}\n")
    return buf.getvalue()


def curves_from_csv(text: str, metric_kind: MetricKind = "accuracy"
                    ) -> list[RateQualityCurve]:
    rows: dict[str, list[tuple[float, float]]] = {}
    order: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("label,"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"bad CSV row at line {lineno}: {line!r}")
        label, bpp, metric = parts[0], float(parts[1]), float(parts[2])
        if label not in rows:
            rows[label] = []
            order.append(label)
        rows[label].append((bpp, metric))
    return [RateQualityCurve(label=l, points=rows[l], metric_kind=metric_kind)
            for l in order]


# -- bit allocation ---------------------------------------------------------


def bit_allocation_map(neg_log2_likelihoods: np.ndarray) -> np.ndarray:
    """Per-position mean bits across channels of a (C, H, W) latent."""
    if neg_log2_likelihoods.ndim != 3:
        raise ContractError("expected a (C, H, W) array of per-element bits")
    return neg_log2_likelihoods.mean(axis=0)


def alloc_map_to_pgm(map2d: np.ndarray) -> str:
    """ASCII PGM rendering, normalized to the map's own range."""
    lo, hi = float(map2d.min()), float(map2d.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((map2d - lo) * scale).astype(int)
    lines = [f"P2", f"{map2d.shape[1]} {map2d.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    return "\n".join(lines) + "\n"


def alloc_map_to_csv(map2d: np.ndarray) -> str:
    return "\n".join(",".join(f"{v:.6f}" for v in row) for row in map2d) + "\n"


# -- image quality ------------------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    err = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if err <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range * data_range / err), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter2_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering over the trailing two axes."""
    m = k1d.size
    from numpy.lib.stride_tricks import sliding_window_view
    v = sliding_window_view(img, m, axis=-2)
    v = np.einsum("...hwk->...hw", v * k1d.reshape((1,) * (v.ndim - 1) + (m,)))
    v = sliding_window_view(v, m, axis=-1)
    return np.einsum("...hwk->...hw", v * k1d.reshape((1,) * (v.ndim - 1) + (m,)))


def _ssim_components(a: np.ndarray, b: np.ndarray, data_range: float
                     ) -> tuple[float, float]:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = _gaussian_kernel()
    mu_a = _filter2_valid(a, k)
    mu_b = _filter2_valid(b, k)
    saa = _filter2_valid(a * a, k) - mu_a * mu_a
    sbb = _filter2_valid(b * b, k) - mu_b * mu_b
    sab = _filter2_valid(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return float(np.mean(lum * cs)), float(np.mean(np.maximum(cs, 0.0)))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., ::2, ::2] + img[..., 1::2, ::2]
                   + img[..., ::2, 1::2] + img[..., 1::2, 1::2])


# First three scales of the standard five-scale weighting, renormalized
# (64x64 inputs cannot support five dyadic scales with an 11-tap window).
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001])
MSSSIM_WEIGHTS = MSSSIM_WEIGHTS / MSSSIM_WEIGHTS.sum()


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Three-scale MS-SSIM for (C, H, W) or (H, W) images in [0, data_range]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    vals = []
    for scale in range(MSSSIM_WEIGHTS.size):
        ssim_full, cs = _ssim_components(a, b, data_range)
        vals.append(ssim_full if scale == MSSSIM_WEIGHTS.size - 1 else cs)
        if scale < MSSSIM_WEIGHTS.size - 1:
            a, b = _downsample2(a), _downsample2(b)
    vals = np.maximum(np.array(vals), 1e-12)
    return float(np.prod(vals ** MSSSIM_WEIGHTS))


def spearman_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr
    rho = spearmanr(x, y).statistic
    return float(rho)
