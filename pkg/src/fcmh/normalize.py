"""Input-level feature rescaling that drives the variable-rate mechanism.

Training uses batch min-max statistics over all pyramid levels pooled
together; inference uses fixed calibrated bounds scaled by a factor `s`.
Dividing the features by a larger `s` before the encoder narrows their
support, which lowers the coded bitrate without touching the quantizer; the
inverse map restores the original scale after decoding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .toydata import FeaturePyramid

EPS = 1e-9


@dataclass
class BatchNormStats:
    min_val: float
    max_val: float


@dataclass
class GlobalNormParams:
    c_min: float
    c_max: float
    s: float = 1.0

    def validate(self) -> None:
        if not (self.c_max > self.c_min):
            raise ContractError(
                f"c_max ({self.c_max}) must exceed c_min ({self.c_min})")
        if not (self.s > 0.0):
            raise ContractError(f"scale factor s must be positive, got {self.s}")


def _map_levels(pyr: FeaturePyramid, fn) -> FeaturePyramid:
    return FeaturePyramid(fn(pyr.p2), fn(pyr.p3), fn(pyr.p4), fn(pyr.p5))


def ivn_train_normalize(batch: list[FeaturePyramid]
                        ) -> tuple[list[FeaturePyramid], BatchNormStats]:
    """Min-max normalize a batch using the pooled min/max of all levels."""
    if not batch:
        raise ContractError("cannot normalize an empty batch")
    pooled = np.concatenate([lvl.reshape(-1) for pyr in batch for lvl in pyr.levels()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi - lo < EPS:
        warnings.warn("constant feature batch: normalized output is all zeros")
    denom = hi - lo + EPS
    out = [_map_levels(pyr, lambda a: (a - lo) / denom) for pyr in batch]
    return out, BatchNormStats(min_val=lo, max_val=hi)


def ivn_infer_normalize(pyr: FeaturePyramid, params: GlobalNormParams
                        ) -> FeaturePyramid:
    """Fixed-bound normalization with bounds scaled by `s`."""
    params.validate()
    lo = params.c_min * params.s
    denom = (params.c_max - params.c_min) * params.s
    return _map_levels(pyr, lambda a: (a - lo) / denom)


def ivdn_denormalize(pyr: FeaturePyramid, params: GlobalNormParams
                     ) -> FeaturePyramid:
    """Exact inverse of ivn_infer_normalize."""
    params.validate()
    span = params.c_max - params.c_min
    return _map_levels(pyr, lambda a: (a * span + params.c_min) * params.s)


def calibrate_global_stats(pyramids: list[FeaturePyramid],
                           lo_pct: float = 0.5, hi_pct: float = 99.5
                           ) -> tuple[float, float]:
    """Robust global bounds from pooled feature values (0.5th/99.5th pct)."""
    if len(pyramids) < 100:
        raise ContractError(
            f"calibration needs at least 100 pyramids, got {len(pyramids)}")
    pooled = np.concatenate(
        [lvl.reshape(-1) for pyr in pyramids for lvl in pyr.levels()])
    c_min = float(np.percentile(pooled, lo_pct))
    c_max = float(np.percentile(pooled, hi_pct))
    if not c_max > c_min:
        raise ContractError("degenerate calibration: c_max <= c_min")
    return c_min, c_max
