"""Grayscale image codec for raw binaries.

Bytes map 1:1 to 8-bit pixels laid out row-major; the last row is
zero-padded.  No scaling or interpolation happens here -- classifiers do
their own normalization and pad/crop.  All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Width buckets (max payload bytes -> row width).  The thresholds follow the
# usual byte-image bucketing scheme; they are configurable and every run
# records the policy it used.
DEFAULT_WIDTH_TABLE: tuple[tuple[int, int], ...] = (
    (10 * 1024, 32),
    (30 * 1024, 64),
    (60 * 1024, 128),
    (100 * 1024, 256),
    (200 * 1024, 384),
)
DEFAULT_MAX_WIDTH = 512


class CodecError(ValueError):
    """Raised on invalid codec input (e.g. empty binary)."""


@dataclass(frozen=True)
class WidthPolicy:
    """How to pick the image width for a payload of a given size.

    mode "fixed" uses ``width`` unconditionally; mode "size-table" walks
    ``table`` (ascending thresholds) and falls back to ``max_width``.
    """

    mode: str = "size-table"
    width: int = 0
    table: tuple[tuple[int, int], ...] = field(default=DEFAULT_WIDTH_TABLE)
    max_width: int = DEFAULT_MAX_WIDTH

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "size-table"):
            raise CodecError(f"unknown width policy mode: {self.mode!r}")
        if self.mode == "fixed" and self.width <= 0:
            raise CodecError("fixed width must be positive")
        if self.mode == "size-table":
            last = 0
            for limit, width in self.table:
                if width <= 0:
                    raise CodecError("table widths must be positive")
                if limit <= last:
                    raise CodecError("table thresholds must be strictly increasing")
                last = limit
            if self.max_width <= 0:
                raise CodecError("max width must be positive")

    @staticmethod
    def fixed(width: int) -> "WidthPolicy":
        return WidthPolicy(mode="fixed", width=width)

    def width_for(self, n_bytes: int) -> int:
        if self.mode == "fixed":
            return self.width
        for limit, width in self.table:
            if n_bytes <= limit:
                return width
        return self.max_width


@dataclass
class GrayImage:
    """A binary rendered as an 8-bit grayscale image.

    ``pixels`` is a (height, width) uint8 array; indices >= ``payload_len``
    (row-major) are zero padding, not payload.
    """

    width: int
    height: int
    pixels: np.ndarray
    payload_len: int

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width)
        if self.payload_len > self.width * self.height:
            raise CodecError("payload_len exceeds pixel count")
        flat = self.pixels.reshape(-1)
        if self.payload_len < flat.size and flat[self.payload_len :].any():
            raise CodecError("padding pixels must be zero")

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


def bytes_to_image(data: bytes, policy: WidthPolicy) -> GrayImage:
    """Lay ``data`` out row-major as 8-bit pixels, zero-padding the last row."""
    if len(data) == 0:
        raise CodecError("empty binary")
    width = policy.width_for(len(data))
    height = math.ceil(len(data) / width)
    flat = np.zeros(width * height, dtype=np.uint8)
    flat[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return GrayImage(width=width, height=height, pixels=flat, payload_len=len(data))


def image_to_bytes(img: GrayImage) -> bytes:
    """Inverse of :func:`bytes_to_image`: re-emit the payload pixels as bytes."""
    return img.flat()[: img.payload_len].tobytes()


def write_pgm(img: GrayImage, path: str) -> None:
    """Export as binary PGM (P5) for visual inspection."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.pixels.tobytes())


def write_pixel_csv(img: GrayImage, path: str) -> None:
    """Dump the pixel matrix as CSV (one row per image row) for debugging."""
    with open(path, "w", encoding="ascii") as fh:
        for row in img.pixels:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
