"""Byte-oriented range coder with 16-bit frequency precision.

Carry propagation follows the classic LZMA scheme (cache byte plus a run of
0xFF bytes). Every CDF table is cumulative with total 65536 and strictly
increasing, so no symbol ever has zero probability. By convention the last
bin of every table is an escape bin: symbols outside the table's regular
range cost the escape bin plus 16 raw bits.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DecodeError

PRECISION = 16
TOTAL = 1 << PRECISION
P_FLOOR = 1.0 / TOTAL
TOP = 1 << 24
MASK32 = 0xFFFFFFFF

SYMBOL_MIN = -(1 << 15)
SYMBOL_MAX = (1 << 15) - 1


def quantize_cdf(pmf: np.ndarray) -> np.ndarray:
    """Turn a probability vector into a strictly increasing uint32 CDF table.

    Every bin gets frequency >= 1 and the total is exactly 65536.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ContractError("pmf must be a non-empty 1-D array")
    if pmf.size > TOTAL // 2:
        raise ContractError("alphabet too large for 16-bit frequencies")
    pmf = np.maximum(pmf, 1e-12)
    pmf = pmf / pmf.sum()
    freq = np.maximum(np.floor(pmf * TOTAL).astype(np.int64), 1)
    diff = TOTAL - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(pmf))] += diff
    elif diff < 0:
        order = np.argsort(-freq, kind="stable")
        k = 0
        while diff < 0:
            i = order[k % order.size]
            take = min(int(freq[i]) - 1, -diff)
            freq[i] -= take
            diff += take
            k += 1
    cdf = np.zeros(pmf.size + 1, dtype=np.uint32)
    np.cumsum(freq, out=cdf[1:])
    return cdf


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._finished = False

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self.cache_size - 1):
                self.out.append(filler)
            self.cache = (low >> 24) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (low << 8) & MASK32

    def encode_bin(self, cum_lo: int, cum_hi: int):
        r = self.range // TOTAL
        self.low += r * cum_lo
        if cum_hi == TOTAL:
            self.range -= r * cum_lo
        else:
            self.range = r * (cum_hi - cum_lo)
        while self.range < TOP:
            self._shift_low()
            self.range <<= 8

    def encode_raw16(self, value: int):
        """16 raw bits via two uniform byte symbols."""
        hi, lo = (value >> 8) & 0xFF, value & 0xFF
        self.encode_bin(hi << 8, (hi + 1) << 8)
        self.encode_bin(lo << 8, (lo + 1) << 8)

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("range-coded stream truncated", offset=self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_value(self) -> int:
        """Current scaled cumulative value in [0, TOTAL)."""
        self._r = self.range // TOTAL
        return min(self.code // self._r, TOTAL - 1)

    def consume_bin(self, cum_lo: int, cum_hi: int):
        r = self._r
        self.code -= r * cum_lo
        if cum_hi == TOTAL:
            self.range -= r * cum_lo
        else:
            self.range = r * (cum_hi - cum_lo)
        if self.code >= self.range:
            raise DecodeError("corrupt range-coded payload", offset=self.pos)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8

    def decode_symbol(self, cdf: np.ndarray) -> int:
        value = self.decode_value()
        sym = int(np.searchsorted(cdf, value, side="right")) - 1
        self.consume_bin(int(cdf[sym]), int(cdf[sym + 1]))
        return sym

    def decode_raw16(self) -> int:
        hi = self.decode_symbol(_UNIFORM256)
        lo = self.decode_symbol(_UNIFORM256)
        return (hi << 8) | lo


_UNIFORM256 = np.arange(257, dtype=np.uint32) * 256


def range_encode(symbols: np.ndarray, provider) -> bytes:
    """Entropy-code integer symbols with per-position CDF tables.

    `provider.cdf(i, prefix)` returns `(cdf, offset)` for position i given the
    already-coded prefix; regular bins cover offset .. offset+K-2 and the last
    bin escapes to a raw 16-bit value.
    """
    symbols = np.asarray(symbols)
    enc = RangeEncoder()
    prefix = symbols  # encoder sees the full sequence; provider only reads [:i]
    for i, sym in enumerate(symbols.tolist()):
        if sym < SYMBOL_MIN or sym > SYMBOL_MAX:
            raise ContractError(
                f"symbol {sym} at position {i} outside the 16-bit coding alphabet")
        cdf, offset = provider.cdf(i, prefix)
        j = sym - offset
        n_regular = len(cdf) - 2
        if 0 <= j < n_regular:
            enc.encode_bin(int(cdf[j]), int(cdf[j + 1]))
        else:
            enc.encode_bin(int(cdf[n_regular]), int(cdf[n_regular + 1]))
            enc.encode_raw16(sym - SYMBOL_MIN)
    return enc.finish()


def range_decode(data: bytes, provider, count: int) -> np.ndarray:
    """Inverse of range_encode; reconstructs the context prefix serially."""
    out = np.zeros(count, dtype=np.int64)
    if count == 0:
        return out
    dec = RangeDecoder(data)
    for i in range(count):
        cdf, offset = provider.cdf(i, out)
        j = dec.decode_symbol(cdf)
        n_regular = len(cdf) - 2
        if j < n_regular:
            out[i] = j + offset
        else:
            out[i] = dec.decode_raw16() + SYMBOL_MIN
    return out


class StaticProvider:
    """One shared CDF table (plus escape bin) for every position."""

    def __init__(self, pmf: np.ndarray, offset: int, escape_mass: float = P_FLOOR):
        full = np.concatenate([np.asarray(pmf, dtype=np.float64), [escape_mass]])
        self.table = quantize_cdf(full)
        self.offset = offset

    def cdf(self, i, prefix):
        return self.table, self.offset


class PerPositionProvider:
    """Precomputed (cdf, offset) pairs, one per position."""

    def __init__(self, tables: list[np.ndarray], offsets: np.ndarray):
        self.tables = tables
        self.offsets = offsets

    def cdf(self, i, prefix):
        return self.tables[i], int(self.offsets[i])
