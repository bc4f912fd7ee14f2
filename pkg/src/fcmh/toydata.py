"""Synthetic image dataset and feature-pyramid containers.

Each image is 3x64x64 in [0, 1]: a textured noise background with exactly one
anti-aliased colored shape (circle, square, or triangle) at a random sub-pixel
center. The shape class and center drive the downstream toy task.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .rng import Xoshiro256, derive_seed

IMAGE_SIZE = 64
CLASS_NAMES = ("circle", "square", "triangle")

PYR_CHANNELS = 32
PYR_SHAPES = {2: (PYR_CHANNELS, 16, 16), 3: (PYR_CHANNELS, 8, 8),
              4: (PYR_CHANNELS, 4, 4), 5: (PYR_CHANNELS, 2, 2)}

FPYR_MAGIC = b"FPYR"
FPYR_VERSION = 1


@dataclass
class ToyImage:
    pixels: np.ndarray          # (3, 64, 64) float64 in [0, 1]
    label: int                  # index into CLASS_NAMES
    center: tuple[float, float]  # (row, col) in pixels
    radius: float               # circumradius-ish size parameter, in pixels


@dataclass
class FeaturePyramid:
    p2: np.ndarray  # (32, 16, 16)
    p3: np.ndarray  # (32, 8, 8)
    p4: np.ndarray  # (32, 4, 4)
    p5: np.ndarray  # (32, 2, 2)

    def levels(self) -> list[np.ndarray]:
        return [self.p2, self.p3, self.p4, self.p5]

    def validate(self) -> None:
        for lvl, arr in zip((2, 3, 4, 5), self.levels()):
            if arr.shape != PYR_SHAPES[lvl]:
                raise ValueError(
                    f"level {lvl} has shape {arr.shape}, expected {PYR_SHAPES[lvl]}")


def _shape_mask(label: int, center: tuple[float, float], radius: float,
                oversample: int = 4) -> np.ndarray:
    """Anti-aliased coverage mask of the shape, (64, 64) in [0, 1]."""
    n = IMAGE_SIZE * oversample
    coords = (np.arange(n) + 0.5) / oversample
    rr = coords[:, None] - center[0]
    cc = coords[None, :] - center[1]
    if label == 0:  # circle
        inside = rr * rr + cc * cc <= radius * radius
    elif label == 1:  # square
        half = radius / np.sqrt(2.0)
        inside = (np.abs(rr) <= half) & (np.abs(cc) <= half)
    else:  # triangle, equilateral pointing up
        # vertices at angle 90, 210, 330 degrees around the center
        ang = np.deg2rad([90.0, 210.0, 330.0])
        vy = center[0] - radius * np.sin(ang)
        vx = center[1] + radius * np.cos(ang)
        inside = np.ones((n, n), dtype=bool)
        py = coords[:, None] + np.zeros((1, n))
        px = np.zeros((n, 1)) + coords[None, :]
        for i in range(3):
            y0, x0 = vy[i], vx[i]
            y1, x1 = vy[(i + 1) % 3], vx[(i + 1) % 3]
            cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            inside &= cross >= 0.0
    mask = inside.reshape(IMAGE_SIZE, oversample, IMAGE_SIZE, oversample)
    return mask.mean(axis=(1, 3))


def _textured_background(rng: Xoshiro256) -> np.ndarray:
    """Low-contrast smooth noise texture, (3, 64, 64)."""
    base = rng.uniform(3, low=0.25, high=0.65)
    coarse = rng.normal((3, 16, 16), std=1.0)
    tex = np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)
    # light box blur to soften the block edges
    padded = np.pad(tex, ((0, 0), (1, 1), (1, 1)), mode="edge")
    tex = sum(padded[:, dy:dy + IMAGE_SIZE, dx:dx + IMAGE_SIZE]
              for dy in range(3) for dx in range(3)) / 9.0
    fine = rng.normal((3, IMAGE_SIZE, IMAGE_SIZE), std=1.0)
    img = base[:, None, None] + 0.05 * tex + 0.015 * fine
    return np.clip(img, 0.0, 1.0)


def render_image(label: int, center: tuple[float, float], radius: float,
                 color: np.ndarray, rng: Xoshiro256) -> np.ndarray:
    bg = _textured_background(rng)
    cov = _shape_mask(label, center, radius)
    return bg * (1.0 - cov[None]) + color[:, None, None] * cov[None]


def generate_dataset(n: int, seed: int) -> list[ToyImage]:
    """Deterministic toy dataset; classes and centers uniformly sampled."""
    if n < 0:
        raise ValueError("n must be >= 0")
    images = []
    for i in range(n):
        rng = Xoshiro256(derive_seed(seed, "toy-image", i), lanes=64)
        label = int(rng.integers(3, 1)[0])
        center = tuple(rng.uniform(2, low=20.0, high=44.0))
        radius = float(rng.uniform(1, low=8.0, high=14.0)[0])
        # saturated foreground color, one dominant channel
        color = rng.uniform(3, low=0.1, high=0.45)
        color[int(rng.integers(3, 1)[0])] = float(rng.uniform(1, 0.75, 1.0)[0])
        pixels = render_image(label, center, radius, color, rng)
        images.append(ToyImage(pixels=pixels, label=label, center=center,
                               radius=radius))
    return images


def foreground_mask(img: ToyImage, dilate_px: float = 2.0) -> np.ndarray:
    """Boolean mask of the shape (slightly dilated), at pixel resolution."""
    cov = _shape_mask(img.label, img.center, img.radius + dilate_px)
    return cov > 0.5


# -- pyramid file io -------------------------------------------------------


def save_pyramid_file(path, pyramids: list[FeaturePyramid]) -> None:
    chunks = [FPYR_MAGIC, struct.pack("<BI", FPYR_VERSION, len(pyramids))]
    for pyr in pyramids:
        pyr.validate()
        for lvl, arr in zip((2, 3, 4, 5), pyr.levels()):
            c, h, w = arr.shape
            chunks.append(struct.pack("<BHHH", lvl, c, h, w))
            chunks.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_pyramid_file(path) -> list[FeaturePyramid]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 9:
        raise FormatError("pyramid file truncated", offset=len(blob))
    if blob[:4] != FPYR_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {FPYR_MAGIC!r}", offset=0)
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != FPYR_VERSION:
        raise FormatError(f"unsupported pyramid file version {version}", offset=4)
    off = 9
    out = []
    for _ in range(count):
        levels = {}
        for want_lvl in (2, 3, 4, 5):
            if off + 7 > len(blob):
                raise FormatError("truncated level record header", offset=off)
            lvl, c, h, w = struct.unpack_from("<BHHH", blob, off)
            off += 7
            if lvl != want_lvl:
                raise FormatError(f"unexpected level id {lvl}", offset=off - 7)
            n = c * h * w
            if off + 4 * n > len(blob):
                raise FormatError(f"truncated payload for level {lvl}", offset=off)
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            levels[lvl] = arr.astype(np.float64).reshape(c, h, w)
        pyr = FeaturePyramid(levels[2], levels[3], levels[4], levels[5])
        pyr.validate()
        out.append(pyr)
    if off != len(blob):
        raise FormatError("trailing bytes after last pyramid", offset=off)
    return out


# -- PPM image io (for the CLI) --------------------------------------------


def save_ppm(path, pixels: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM."""
    arr = np.clip(pixels, 0.0, 1.0)
    byte = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = byte.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(byte.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError("not a binary PPM (P6) file", offset=0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PPM supported")
    data = parts[4][:w * h * 3]
    if len(data) < w * h * 3:
        raise FormatError("PPM pixel payload truncated", offset=len(blob) - len(parts[4]))
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
