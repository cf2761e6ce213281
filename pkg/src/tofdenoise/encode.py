"""Per-pixel patch encodings and training targets.

The 280-long input for a pixel ``p`` is ``[x_R | x_A | b_R | b_A]``:

* ``x_R`` (120): ranges of the 11x11 patch minus ``range(p)``, divided by
  ``2 * range_window`` and clamped to [-0.5, 0.5]; centre pixel dropped,
  row-major order.
* ``x_A`` (120): the same for amplitude with ``amp_window``.
* ``b_R``, ``b_A`` (20 each): one-hot uniform quantisation of ``range(p)``
  and ``amp(p)``; out-of-span values go to the end bins.

The boundary detectors use only the first 240 entries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import AmplitudeImage, RangeImage, read_image

TARGET_CLAMP_MM = 15.0

KIND_RANGE = 0
KIND_BOUNDARY = 1

SAMPLE_MAGIC = b"TFS1"
SAMPLE_HEADER = struct.Struct("<4sII")


class BorderError(ValueError):
    """Pixel too close to the border, or its window holds invalid pixels."""


@dataclass(frozen=True)
class EncoderParams:
    patch: int = 11
    range_window: float = 30.0
    range_min: float = 150.0
    range_max: float = 400.0
    amp_min: float = 0.0
    amp_max: float | None = None
    amp_window: float | None = None
    bins: int = 20

    def __post_init__(self):
        if self.patch < 3 or self.patch % 2 == 0:
            raise ValueError("patch side must be odd and >= 3")
        if self.bins != 20:
            raise ValueError("the quantisers use 20 bins")
        if not self.range_max > self.range_min:
            raise ValueError("range_max must exceed range_min")
        if self.amp_max is not None and not self.amp_max > self.amp_min:
            raise ValueError("amp_max must exceed amp_min")
        if self.range_window <= 0 or (self.amp_window is not None and self.amp_window <= 0):
            raise ValueError("normalisation windows must be positive")

    @property
    def radius(self) -> int:
        return self.patch // 2

    @property
    def n_patch(self) -> int:
        return self.patch * self.patch - 1

    @property
    def input_size(self) -> int:
        return 2 * self.n_patch + 2 * self.bins

    @property
    def ready(self) -> bool:
        return self.amp_max is not None and self.amp_window is not None

    def with_amplitude_span(self, amplitudes) -> EncoderParams:
        """Set the amplitude span to [0, 99.5th percentile] of ``amplitudes``."""
        hi = float(np.percentile(np.asarray(amplitudes, dtype=np.float64), 99.5))
        if not hi > self.amp_min:
            raise ValueError("amplitude percentile does not exceed amp_min")
        return replace(self, amp_max=hi, amp_window=(hi - self.amp_min) / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderParams:
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _require_ready(params: EncoderParams):
    if not params.ready:
        raise ValueError("encoder amplitude span not set; call with_amplitude_span first")


def quantize(value, lo: float, hi: float, bins: int = 20):
    """Bin index of ``value`` in ``bins`` uniform intervals over [lo, hi), clamped."""
    idx = np.floor(bins * (np.asarray(value, dtype=np.float64) - lo) / (hi - lo))
    return np.clip(idx, 0, bins - 1).astype(np.int64)


def patch_offsets(patch: int) -> list[tuple[int, int]]:
    r = patch // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def encode_patch(rng_img: RangeImage, amp: AmplitudeImage, p, params: EncoderParams) -> np.ndarray:
    """Encode pixel ``p = (x, y)`` into the 280-long input vector."""
    _require_ready(params)
    x, y = p
    r = params.radius
    h, w = rng_img.shape
    if not (r <= x < w - r and r <= y < h - r):
        raise BorderError(f"pixel ({x}, {y}) window leaves the {w}x{h} image")
    win = (slice(y - r, y + r + 1), slice(x - r, x + r + 1))
    if not (rng_img.valid_mask[win].all() and amp.valid_mask[win].all()):
        raise BorderError(f"pixel ({x}, {y}) window contains invalid pixels")
    rc = float(rng_img.data[y, x])
    ac = float(amp.data[y, x])
    out = np.zeros(params.input_size, dtype=np.float32)
    n = params.n_patch
    for i, (dy, dx) in enumerate(patch_offsets(params.patch)):
        dr = float(rng_img.data[y + dy, x + dx]) - rc
        da = float(amp.data[y + dy, x + dx]) - ac
        out[i] = min(0.5, max(-0.5, dr / (2.0 * params.range_window)))
        out[n + i] = min(0.5, max(-0.5, da / (2.0 * params.amp_window)))
    out[2 * n + int(quantize(rc, params.range_min, params.range_max, params.bins))] = 1.0
    out[2 * n + params.bins + int(quantize(ac, params.amp_min, params.amp_max, params.bins))] = 1.0
    return out


def eligible_mask(rng_img: RangeImage, amp: AmplitudeImage, params: EncoderParams) -> np.ndarray:
    """Pixels whose whole window is inside the image and valid in both inputs."""
    r = params.radius
    h, w = rng_img.shape
    out = np.zeros((h, w), dtype=bool)
    if h < params.patch or w < params.patch:
        return out
    ok = rng_img.valid_mask & amp.valid_mask
    full = sliding_window_view(ok, (params.patch, params.patch)).all(axis=(-2, -1))
    out[r:h - r, r:w - r] = full
    return out


def encode_image(rng_img: RangeImage, amp: AmplitudeImage, params: EncoderParams,
                 where: np.ndarray | None = None):
    """Vectorised :func:`encode_patch` over all eligible pixels.

    Returns ``(inputs, ys, xs)`` with ``inputs`` of shape (N, 280), rows in
    row-major pixel order. ``where`` further restricts the pixel set.
    """
    _require_ready(params)
    if rng_img.shape != amp.shape:
        raise ValueError("range and amplitude shapes differ")
    mask = eligible_mask(rng_img, amp, params)
    if where is not None:
        mask &= where
    ys, xs = np.nonzero(mask)
    n = params.n_patch
    out = np.zeros((ys.size, params.input_size), dtype=np.float32)
    if ys.size == 0:
        return out, ys, xs
    r = params.radius
    keep = np.arange(params.patch * params.patch) != (params.patch * params.patch) // 2
    for k, (data, window, lo, hi, col) in enumerate((
        (rng_img.data, params.range_window, params.range_min, params.range_max, 0),
        (amp.data, params.amp_window, params.amp_min, params.amp_max, n),
    )):
        d = data.astype(np.float64)
        windows = sliding_window_view(d, (params.patch, params.patch))[ys - r, xs - r]
        windows = windows.reshape(ys.size, -1)[:, keep]
        centre = d[ys, xs]
        out[:, col:col + n] = np.clip((windows - centre[:, None]) / (2.0 * window), -0.5, 0.5)
        bins = quantize(centre, lo, hi, params.bins)
        out[np.arange(ys.size), 2 * n + k * params.bins + bins] = 1.0
    return out, ys, xs


def make_range_target(ref: RangeImage, tof: RangeImage, p) -> float:
    x, y = p
    if not ref.valid_mask[y, x]:
        raise ValueError(f"reference missing at ({x}, {y})")
    if not tof.valid_mask[y, x]:
        raise ValueError(f"ToF range missing at ({x}, {y})")
    t = float(ref.data[y, x]) - float(tof.data[y, x])
    return min(TARGET_CLAMP_MM, max(-TARGET_CLAMP_MM, t))


def range_targets(ref: RangeImage, tof: RangeImage, ys, xs) -> np.ndarray:
    t = ref.data[ys, xs].astype(np.float64) - tof.data[ys, xs].astype(np.float64)
    return np.clip(t, -TARGET_CLAMP_MM, TARGET_CLAMP_MM).astype(np.float32)


@dataclass
class SampleSet:
    """Stacked training samples: ``inputs`` (N, D) and ``targets`` (N,)."""

    inputs: np.ndarray
    targets: np.ndarray
    kind: int = KIND_RANGE

    def __len__(self):
        return len(self.targets)

    def shuffled(self, seed) -> SampleSet:
        perm = np.random.default_rng(seed).permutation(len(self))
        return SampleSet(self.inputs[perm], self.targets[perm], self.kind)

    @classmethod
    def concat(cls, parts, kind=KIND_RANGE, dim=None) -> SampleSet:
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, dim or 0), np.float32), np.zeros(0, np.float32), kind)
        return cls(np.concatenate([p.inputs for p in parts]),
                   np.concatenate([p.targets for p in parts]), kind)


def range_samples(tof: RangeImage, amp: AmplitudeImage, ref: RangeImage,
                  params: EncoderParams) -> SampleSet:
    """Samples at eligible pixels whose reference is present."""
    inputs, ys, xs = encode_image(tof, amp, params, where=ref.valid_mask)
    return SampleSet(inputs, range_targets(ref, tof, ys, xs), KIND_RANGE)


def build_dataset(pairs, params: EncoderParams, seed) -> SampleSet:
    """Range-NN samples from ``(tof_range, amplitude, reference)`` triples.

    ``pairs`` may hold images or file paths. Samples are shuffled by ``seed``.
    """
    parts = []
    for tof, amp, ref in pairs:
        tof, amp, ref = (read_image(v) if isinstance(v, (str, Path)) else v for v in (tof, amp, ref))
        parts.append(range_samples(tof, amp, ref, params))
    return SampleSet.concat(parts, KIND_RANGE, params.input_size).shuffled(seed)


def write_samples(samples: SampleSet, path) -> None:
    """Cache file: magic, u32 count, u32 stride, then float32 records
    ``inputs..., target, kind``."""
    n, d = samples.inputs.shape
    rec = np.empty((n, d + 2), dtype="<f4")
    rec[:, :d] = samples.inputs
    rec[:, d] = samples.targets
    rec[:, d + 1] = samples.kind
    Path(path).write_bytes(SAMPLE_HEADER.pack(SAMPLE_MAGIC, n, d + 2) + rec.tobytes())


def read_samples(path) -> SampleSet:
    buf = Path(path).read_bytes()
    if len(buf) < SAMPLE_HEADER.size:
        raise ValueError("truncated sample cache header")
    magic, n, stride = SAMPLE_HEADER.unpack_from(buf)
    if magic != SAMPLE_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if stride < 2 or len(buf) != SAMPLE_HEADER.size + 4 * n * stride:
        raise ValueError("sample cache size does not match its header")
    rec = np.frombuffer(buf, dtype="<f4", offset=SAMPLE_HEADER.size).reshape(n, stride)
    kinds = np.unique(rec[:, -1])
    kind = int(kinds[0]) if kinds.size else KIND_RANGE
    return SampleSet(rec[:, :-2].astype(np.float32), rec[:, -2].astype(np.float32), kind)
