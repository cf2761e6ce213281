"""Per-pixel linear calibration: ``true = a*range + b*amplitude + c``.

File format (``TFC1``): magic, u32 width, u32 height, then width*height
float32 (a, b, c) triples, row-major, little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import AmplitudeImage, RangeImage

MAGIC = b"TFC1"
HEADER = struct.Struct("<4sII")


class UnderdeterminedPixelError(ValueError):
    def __init__(self, x, y, reason):
        super().__init__(f"pixel (x={x}, y={y}) is underdetermined: {reason}")
        self.x = x
        self.y = y


class CalibFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CalibModel:
    """Coefficient planes of shape ``(height, width)``, float64 in memory."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.a), np.shape(self.b), np.shape(self.c)}
        if len(shapes) != 1 or len(np.shape(self.a)) != 2:
            raise ValueError("coefficient planes must be 2-D and share a shape")
        for name in "abc":
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite coefficient in plane {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.a.shape

    @classmethod
    def identity(cls, height, width):
        return cls(np.ones((height, width)), np.zeros((height, width)), np.zeros((height, width)))


def fit_calibration(ranges, amplitudes, truths, valid=None) -> CalibModel:
    """Least-squares fit of (a, b, c) per pixel from stacked observations.

    Parameters
    ----------
    ranges, amplitudes, truths : array_like, shape (n, height, width)
        Observed range, observed amplitude and true range per frame.
    valid : array_like of bool, optional
        Same shape; False drops that observation for that pixel.

    Raises
    ------
    UnderdeterminedPixelError
        When a pixel has fewer than 3 observations or its (range, amplitude)
        samples are collinear.
    """
    r = np.asarray(ranges, dtype=np.float64)
    amp = np.asarray(amplitudes, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if r.shape != amp.shape or r.shape != t.shape or r.ndim != 3:
        raise ValueError("observations must be (n, height, width) arrays of equal shape")
    wgt = np.ones(r.shape) if valid is None else np.asarray(valid, dtype=bool).astype(np.float64)
    if wgt.shape != r.shape:
        raise ValueError("valid mask shape mismatch")
    count = wgt.sum(0)
    few = count < 3
    if np.any(few):
        y, x = np.argwhere(few)[0]
        raise UnderdeterminedPixelError(int(x), int(y), f"{int(count[y, x])} observations, need >= 3")
    r, amp, t = r * wgt, amp * wgt, t * wgt
    # 3x3 normal equations per pixel with the bias eliminated by centring
    rm, am, tm = r.sum(0) / count, amp.sum(0) / count, t.sum(0) / count
    dr, da, dt = (r - rm) * wgt, (amp - am) * wgt, (t - tm) * wgt
    srr = (dr * dr).sum(0)
    saa = (da * da).sum(0)
    sra = (dr * da).sum(0)
    srt = (dr * dt).sum(0)
    sat = (da * dt).sum(0)
    det = srr * saa - sra * sra
    bad = ~(det > 1e-12 * srr * saa) | (srr == 0) | (saa == 0)
    if np.any(bad):
        y, x = np.argwhere(bad)[0]
        raise UnderdeterminedPixelError(int(x), int(y), "collinear (range, amplitude) samples")
    a = (srt * saa - sat * sra) / det
    b = (sat * srr - srt * sra) / det
    c = tm - a * rm - b * am
    return CalibModel(a, b, c)


def apply_calibration(model: CalibModel, rng_img: RangeImage, amp: AmplitudeImage) -> RangeImage:
    if rng_img.shape != model.shape or amp.shape != model.shape:
        raise ValueError(f"image shape {rng_img.shape} does not match model {model.shape}")
    out = model.a * rng_img.data + model.b * amp.data + model.c
    out = np.where(rng_img.valid_mask, np.maximum(out, 0.0), rng_img.data)
    return RangeImage(out, rng_img.valid_mask)


def encode_calib(model: CalibModel) -> bytes:
    h, w = model.shape
    coeffs = np.stack([model.a, model.b, model.c], axis=-1).astype("<f4")
    return HEADER.pack(MAGIC, w, h) + coeffs.tobytes()


def decode_calib(buf: bytes) -> CalibModel:
    if len(buf) < HEADER.size:
        raise CalibFormatError("truncated header")
    magic, w, h = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CalibFormatError(f"bad magic {magic!r}")
    expected = HEADER.size + 12 * w * h
    if len(buf) != expected:
        raise CalibFormatError(f"expected {expected} bytes, got {len(buf)}")
    coeffs = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(h, w, 3)
    return CalibModel(coeffs[..., 0], coeffs[..., 1], coeffs[..., 2])


def save_calib(model: CalibModel, path) -> None:
    Path(path).write_bytes(encode_calib(model))


def load_calib(path) -> CalibModel:
    return decode_calib(Path(path).read_bytes())
