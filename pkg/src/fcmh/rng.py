"""Deterministic xoshiro256** random number generator.

All stochastic pieces of the pipeline (weight init, training noise, diffusion
sampling, dataset synthesis) draw from this generator so that identical seeds
give bit-identical runs on any platform, independent of numpy version.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK = _U64(0xFFFFFFFFFFFFFFFF)


def _splitmix64_next(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Derive an independent child seed from a master seed and tag path."""
    s = seed & 0xFFFFFFFFFFFFFFFF
    for tag in tags:
        if isinstance(tag, str):
            for ch in tag.encode("utf-8"):
                s, out = _splitmix64_next(s ^ ch)
        else:
            s, out = _splitmix64_next(s ^ (tag & 0xFFFFFFFFFFFFFFFF))
        s = out
    return s


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Xoshiro256:
    """Vectorized xoshiro256** with a fixed number of parallel lanes.

    Draw order depends only on the cumulative number of values requested,
    not on how requests are chunked.
    """

    def __init__(self, seed: int, lanes: int = 256):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = lanes
        state = seed & 0xFFFFFFFFFFFFFFFF
        raw = np.empty((4, lanes), dtype=np.uint64)
        for i in range(4 * lanes):
            state, out = _splitmix64_next(state)
            raw[i % 4, i // 4] = out
        self._s = raw
        self._buf = np.empty(0, dtype=np.uint64)
        self._norm_buf = np.empty(0, dtype=np.float64)

    def _block(self) -> np.ndarray:
        s = self._s
        result = _rotl(s[1] * _U64(5), 7) * _U64(9)
        t = s[1] << _U64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        while self._buf.size < n:
            blocks = [self._buf]
            need = n - self._buf.size
            rounds = -(-need // self.lanes)
            for _ in range(rounds):
                blocks.append(self._block())
            self._buf = np.concatenate(blocks)
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        while self._norm_buf.size < n:
            m = max(n - self._norm_buf.size, 2 * self.lanes)
            m += m % 2
            u = self.uniform(2 * m)
            u1 = np.maximum(u[:m], 2.0 ** -53)
            u2 = u[m:]
            r = np.sqrt(-2.0 * np.log(u1))
            ang = (2.0 * np.pi) * u2
            z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])
            self._norm_buf = np.concatenate([self._norm_buf, z])
        out, self._norm_buf = self._norm_buf[:n], self._norm_buf[n:]
        return (mean + std * out).reshape(shape)

    def integers(self, k: int, shape) -> np.ndarray:
        """Uniform integers in [0, k)."""
        return np.minimum((self.uniform(shape) * k).astype(np.int64), k - 1)

    def shuffle(self, n: int) -> np.ndarray:
        """A permutation of range(n) (Fisher-Yates over drawn keys)."""
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")
