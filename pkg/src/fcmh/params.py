"""Named parameter sets with binary serialization.

File format ("FCMP"): magic, version u8, count u32, then per-tensor records of
(name_len u16, UTF-8 name, rank u8, dims u32 each, little-endian f32 payload),
with records sorted lexicographically by name. Training math is float64;
files store float32.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, StateError

MAGIC = b"FCMP"
VERSION = 1
META_PREFIX = "_meta/"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class ParamStore:
    """Ordered mapping of parameter names to Tensors, plus `_meta/` scalars."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name: {name}")
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def names(self) -> list[str]:
        return sorted(self._items)

    def trainable(self) -> list[Tensor]:
        return [t for n, t in sorted(self._items.items())
                if not n.startswith(META_PREFIX) and t.requires_grad]

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in sorted(self._items.items())
                if not n.startswith(META_PREFIX) and t.requires_grad]

    # -- meta helpers --------------------------------------------------------

    def set_meta(self, key: str, values) -> None:
        name = META_PREFIX + key
        arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if name in self._items:
            self._items[name] = Tensor(arr)
        else:
            self.register(name, Tensor(arr))

    def get_meta(self, key: str, default=None):
        name = META_PREFIX + key
        if name not in self._items:
            return default
        return self._items[name].data

    def set_meta_bytes(self, key: str, payload: bytes) -> None:
        self.set_meta(key, np.frombuffer(payload, dtype=np.uint8).astype(np.float64))

    def get_meta_bytes(self, key: str) -> bytes | None:
        arr = self.get_meta(key)
        if arr is None:
            return None
        return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8))

    def mark_trained(self) -> None:
        self.set_meta("trained", 1.0)

    def is_trained(self) -> bool:
        v = self.get_meta("trained")
        return v is not None and float(v[0]) == 1.0

    def require_trained(self, what: str) -> None:
        if not self.is_trained():
            raise StateError(f"{what} parameters are not trained/loaded")

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<BI", VERSION, len(self._items))]
        for name in sorted(self._items):
            t = self._items[name]
            nb = name.encode("utf-8")
            dims = t.data.shape if t.data.ndim else (1,)
            chunks.append(struct.pack("<H", len(nb)))
            chunks.append(nb)
            chunks.append(struct.pack("<B", len(dims)))
            chunks.append(struct.pack(f"<{len(dims)}I", *dims))
            chunks.append(t.data.astype("<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if len(blob) < 9:
            raise FormatError("parameter file truncated", offset=len(blob))
        if blob[:4] != MAGIC:
            raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        off = 9
        ps = cls()
        for _ in range(count):
            if off + 2 > len(blob):
                raise FormatError("truncated name length", offset=off)
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            if off + nlen > len(blob):
                raise FormatError("truncated name", offset=off)
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            if off + 1 > len(blob):
                raise FormatError("truncated rank", offset=off)
            rank = blob[off]
            off += 1
            if off + 4 * rank > len(blob):
                raise FormatError("truncated dims", offset=off)
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims))
            if off + 4 * n > len(blob):
                raise FormatError(f"truncated payload for {name}", offset=off)
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            ps.register(name, Tensor(data.astype(np.float64).reshape(dims)))
        if off != len(blob):
            raise FormatError("trailing bytes after last record", offset=off)
        return ps

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def load_into(self, other: "ParamStore") -> None:
        """Copy values from `other` into this store's existing tensors."""
        for name, t in self._items.items():
            if name.startswith(META_PREFIX):
                continue
            if name not in other:
                raise FormatError(f"parameter {name} missing from file")
            src = other[name].data
            if src.shape != t.data.shape:
                raise FormatError(
                    f"parameter {name} shape {src.shape} != expected {t.data.shape}")
            t.data[...] = src
        for name in other._items:
            if name.startswith(META_PREFIX):
                key = name[len(META_PREFIX):]
                self.set_meta(key, other._items[name].data)
