"""The coded-stream container: header plus length-prefixed payload sections.

Layout (all integers little-endian): magic "FCMH", version u8, flags u8
(bit 0 = color payload present), s f32, c_min f32, c_max f32, image height
u16, image width u16, main-latent dims u16 x3, then per section u32 length
followed by that many bytes: hyper latent, main latent, optional color latent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import FormatError

MAGIC = b"FCMH"
VERSION = 1
FLAG_HUMAN = 0x01

_HEADER = struct.Struct("<4sBBfffHHHHH")


@dataclass
class Bitstream:
    s: float
    c_min: float
    c_max: float
    image_size: tuple[int, int]          # (H, W)
    latent_dims: tuple[int, int, int]    # (C, H, W) of the main latent
    hyper_payload: bytes = b""
    main_payload: bytes = b""
    color_payload: bytes | None = None

    @property
    def has_human_payload(self) -> bool:
        return self.color_payload is not None

    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def header_bits(self) -> int:
        sections = 2 + (1 if self.has_human_payload else 0)
        return 8 * (_HEADER.size + 4 * sections)

    def payload_bits(self) -> dict[str, int]:
        out = {"hyper": 8 * len(self.hyper_payload),
               "main": 8 * len(self.main_payload)}
        if self.color_payload is not None:
            out["color"] = 8 * len(self.color_payload)
        return out

    def to_bytes(self) -> bytes:
        flags = FLAG_HUMAN if self.has_human_payload else 0
        head = _HEADER.pack(MAGIC, VERSION, flags, self.s, self.c_min, self.c_max,
                            self.image_size[0], self.image_size[1],
                            *self.latent_dims)
        chunks = [head]
        sections = [self.hyper_payload, self.main_payload]
        if self.color_payload is not None:
            sections.append(self.color_payload)
        for payload in sections:
            if len(payload) > 0xFFFFFFFF:
                raise FormatError("payload section length overflows u32")
            chunks.append(struct.pack("<I", len(payload)))
            chunks.append(payload)
        return b"".join(chunks)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())


def read_bitstream(blob: bytes) -> Bitstream:
    if len(blob) < _HEADER.size:
        raise FormatError("stream shorter than header", offset=len(blob))
    magic, version, flags, s, c_min, c_max, ih, iw, lc, lh, lw = \
        _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}", offset=4)
    off = _HEADER.size
    names = ["hyper", "main"] + (["color"] if flags & FLAG_HUMAN else [])
    payloads = {}
    for name in names:
        if off + 4 > len(blob):
            raise FormatError(f"truncated length of section '{name}'", offset=off)
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + length > len(blob):
            raise FormatError(f"truncated payload of section '{name}'", offset=off)
        payloads[name] = blob[off:off + length]
        off += length
    if off != len(blob):
        raise FormatError("trailing bytes after last section", offset=off)
    return Bitstream(s=s, c_min=c_min, c_max=c_max, image_size=(ih, iw),
                     latent_dims=(lc, lh, lw),
                     hyper_payload=payloads["hyper"],
                     main_payload=payloads["main"],
                     color_payload=payloads.get("color"))


def load_bitstream(path) -> Bitstream:
    with open(path, "rb") as f:
        return read_bitstream(f.read())
