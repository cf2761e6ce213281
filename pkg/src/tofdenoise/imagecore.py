"""Image containers and the little-endian ``TFD1`` image file format.

Layout::

    0-3    magic b"TFD1"
    4-7    u32 width
    8-11   u32 height
    12     u8 channel tag (0 range mm, 1 amplitude, 2 edge binary, 3 orientation group)
    13     u8 mask flag
    14-    width*height float32, row-major
           [width*height u8 mask bytes, only when mask flag == 1]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np

MAGIC = b"TFD1"
HEADER = struct.Struct("<4sIIBB")
MAX_PIXELS = 1 << 28

CHANNEL_RANGE = 0
CHANNEL_AMPLITUDE = 1
CHANNEL_EDGE = 2
CHANNEL_ORIENTATION = 3


class ImageFormatError(ValueError):
    """Base class for unreadable image files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class DimensionOverflowError(ImageFormatError):
    pass


class InvalidImageError(ValueError):
    """Image data violates the container invariants."""


@dataclass(frozen=True, eq=False)
class Image:
    """2-D float32 grid with a per-pixel validity mask.

    Arrays are copied on construction and made read-only.
    """

    data: np.ndarray
    valid_mask: np.ndarray | None = None

    channel: ClassVar[int] = -1

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 2:
            raise InvalidImageError(f"expected a 2-D array, got shape {data.shape}")
        if self.valid_mask is None:
            mask = np.ones(data.shape, dtype=bool)
        else:
            mask = np.array(self.valid_mask, dtype=bool, copy=True)
        if mask.shape != data.shape:
            raise InvalidImageError(f"mask shape {mask.shape} != data shape {data.shape}")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid_mask", mask)
        self.check()

    @classmethod
    def from_array(cls, data, valid_mask=None):
        return cls(data, valid_mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def check(self):
        """Raise :class:`InvalidImageError` if valid pixels are not finite and >= 0."""
        vals = self.data[self.valid_mask]
        if not np.all(np.isfinite(vals)):
            raise InvalidImageError("non-finite value at a valid pixel")
        if np.any(vals < 0):
            raise InvalidImageError("negative value at a valid pixel")

    def with_data(self, data, valid_mask=None):
        return type(self)(data, self.valid_mask if valid_mask is None else valid_mask)

    def equals(self, other: Image) -> bool:
        """Bit-exact comparison of channel, data bytes and mask."""
        return (
            self.channel == other.channel
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.valid_mask, other.valid_mask)
        )


class RangeImage(Image):
    channel = CHANNEL_RANGE


class AmplitudeImage(Image):
    channel = CHANNEL_AMPLITUDE


class EdgeImage(Image):
    channel = CHANNEL_EDGE


class OrientationImage(Image):
    channel = CHANNEL_ORIENTATION


_BY_CHANNEL = {
    CHANNEL_RANGE: RangeImage,
    CHANNEL_AMPLITUDE: AmplitudeImage,
    CHANNEL_EDGE: EdgeImage,
    CHANNEL_ORIENTATION: OrientationImage,
}


def encode_image(img: Image) -> bytes:
    img.check()
    h, w = img.shape
    has_mask = not bool(img.valid_mask.all())
    parts = [
        HEADER.pack(MAGIC, w, h, img.channel, int(has_mask)),
        img.data.astype("<f4").tobytes(),
    ]
    if has_mask:
        parts.append(img.valid_mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_image(buf: bytes) -> Image:
    if len(buf) < HEADER.size:
        raise MalformedHeaderError(f"header needs {HEADER.size} bytes, got {len(buf)}")
    magic, w, h, channel, mask_flag = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if channel not in _BY_CHANNEL:
        raise MalformedHeaderError(f"unknown channel tag {channel}")
    if mask_flag not in (0, 1):
        raise MalformedHeaderError(f"bad mask flag {mask_flag}")
    if w == 0 or h == 0 or w * h > MAX_PIXELS:
        raise DimensionOverflowError(f"unsupported dimensions {w}x{h}")
    n = w * h
    expected = HEADER.size + 4 * n + (n if mask_flag else 0)
    if len(buf) < expected:
        raise TruncatedPayloadError(f"expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise MalformedHeaderError(f"{len(buf) - expected} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER.size).reshape(h, w)
    if mask_flag:
        raw = np.frombuffer(buf, dtype=np.uint8, count=n, offset=HEADER.size + 4 * n)
        if np.any(raw > 1):
            raise MalformedHeaderError("mask bytes must be 0 or 1")
        mask = raw.reshape(h, w).astype(bool)
    else:
        mask = None
    return _BY_CHANNEL[channel](data.astype(np.float32), mask)


def write_image(img: Image, path) -> None:
    Path(path).write_bytes(encode_image(img))


def read_image(path) -> Image:
    return decode_image(Path(path).read_bytes())
