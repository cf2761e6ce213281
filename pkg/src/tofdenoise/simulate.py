"""Synthetic desk-scale ToF scenes.

Stands in for the robot-arm capture rig: boxes on a platform are rendered to
clean range/amplitude images, corrupted by a two-effect multipath model
(boundary mixing plus concavity over-shoot), biased by a per-pixel affine
systematic error, and re-scanned several times to build fused references.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .imagecore import AmplitudeImage, RangeImage

REF_RANGE_MM = 250.0


@dataclass(frozen=True)
class Box:
    center_x: float
    center_y: float
    half_w: float
    half_h: float
    top_depth: float
    reflectivity: float = 0.6


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    platform_depth: float
    objects: tuple[Box, ...] = ()
    platform_reflectivity: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        self.check()

    def check(self):
        if not 0 < self.platform_reflectivity <= 1:
            raise ValueError("platform reflectivity must lie in (0, 1]")
        for i, b in enumerate(self.objects):
            if not b.top_depth < self.platform_depth:
                raise ValueError(f"object {i} is not in front of the platform")
            if not 0 < b.reflectivity <= 1:
                raise ValueError(f"object {i} reflectivity must lie in (0, 1]")
            x0, x1, y0, y1 = _footprint(b)
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height or x1 <= x0 or y1 <= y0:
                raise ValueError(f"object {i} footprint leaves the image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [asdict(b) for b in self.objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        objs = tuple(Box(**o) for o in d.get("objects", ()))
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            platform_depth=float(d["platform_depth"]),
            objects=objs,
            platform_reflectivity=float(d.get("platform_reflectivity", 0.8)),
        )


@dataclass(frozen=True)
class DistortionParams:
    psf_radius: int = 2
    overshoot_gain: float = 0.15
    overshoot_radius: int = 4
    noise_sigma: float = 1.0

    def __post_init__(self):
        for name in ("psf_radius", "overshoot_gain", "overshoot_radius", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.psf_radius > 10 or self.overshoot_radius > 10:
            raise ValueError("radii are limited to 10 pixels")


@dataclass(frozen=True)
class SystematicError:
    """Per-pixel affine bias; ``true = a*raw + b*amplitude + c``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


@dataclass
class ScanSet:
    scans: list[RangeImage] = field(default_factory=list)

    def __post_init__(self):
        shapes = {s.shape for s in self.scans}
        if len(shapes) > 1:
            raise ValueError("all scans must share dimensions")


def _footprint(b: Box) -> tuple[int, int, int, int]:
    # half-open pixel ranges covered by the box: [x0, x1) x [y0, y1)
    x0 = int(np.ceil(b.center_x - b.half_w - 0.5))
    x1 = int(np.floor(b.center_x + b.half_w - 0.5)) + 1
    y0 = int(np.ceil(b.center_y - b.half_h - 0.5))
    y1 = int(np.floor(b.center_y + b.half_h - 0.5)) + 1
    return x0, x1, y0, y1


def render_reference(scene: Scene) -> tuple[RangeImage, AmplitudeImage]:
    depth = np.full((scene.height, scene.width), scene.platform_depth, dtype=np.float64)
    refl = np.full_like(depth, scene.platform_reflectivity)
    for b in scene.objects:
        x0, x1, y0, y1 = _footprint(b)
        win = depth[y0:y1, x0:x1]
        front = b.top_depth < win
        win[front] = b.top_depth
        refl[y0:y1, x0:x1][front] = b.reflectivity
    amp = refl / (depth / REF_RANGE_MM) ** 2
    return RangeImage(depth), AmplitudeImage(amp)


def _box_sum(img: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window clipped to the image."""
    if radius == 0:
        return img.copy()
    h, w = img.shape
    pad = np.pad(img, radius)
    c = pad.cumsum(0).cumsum(1)
    c = np.pad(c, ((1, 0), (1, 0)))
    k = 2 * radius + 1
    return c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]


def _windowed_stack(img: np.ndarray, radius: int):
    """Yield shifted copies of ``img`` and an in-bounds mask for each window offset."""
    h, w = img.shape
    pad = np.pad(img, radius)
    inside = np.pad(np.ones_like(img, dtype=bool), radius)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(radius + dy, radius + dy + h)
            xs = slice(radius + dx, radius + dx + w)
            yield pad[ys, xs], inside[ys, xs]


def multipath_mix(reference: np.ndarray, amplitude: np.ndarray, radius: int) -> np.ndarray:
    """Amplitude-weighted blend of reference ranges in the clipped window.

    Evaluated as ``r(p) + sum A(q)(r(q) - r(p)) / sum A(q)`` so flat regions
    are reproduced exactly.
    """
    ref = reference.astype(np.float64)
    if radius == 0:
        return ref.copy()
    amp = amplitude.astype(np.float64)
    num = np.zeros_like(ref)
    for (rq, inside), (aq, _) in zip(_windowed_stack(ref, radius), _windowed_stack(amp, radius)):
        num += np.where(inside, aq * (rq - ref), 0.0)
    den = _box_sum(amp, radius)
    out = ref.copy()
    np.divide(num, den, out=num, where=den > 0)
    out += np.where(den > 0, num, 0.0)
    return out


def overshoot_bias(reference: np.ndarray, gain: float, radius: int) -> np.ndarray:
    ref = reference.astype(np.float64)
    if gain == 0 or radius == 0:
        return np.zeros_like(ref)
    total = np.zeros_like(ref)
    count = np.zeros_like(ref)
    for rq, inside in _windowed_stack(ref, radius):
        total += np.where(inside, np.maximum(0.0, rq - ref), 0.0)
        count += inside
    return gain * total / count


def apply_multipath(reference: RangeImage, amplitude: AmplitudeImage, params: DistortionParams,
                    rng: np.random.Generator | int | None = None) -> RangeImage:
    if reference.shape != amplitude.shape:
        raise ValueError("reference and amplitude shapes differ")
    out = multipath_mix(reference.data, amplitude.data, params.psf_radius)
    out += overshoot_bias(reference.data, params.overshoot_gain, params.overshoot_radius)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(rng)
        out += rng.normal(0.0, params.noise_sigma, size=out.shape)
    np.maximum(out, 0.0, out=out)
    return RangeImage(out, reference.valid_mask)


def mixed_amplitude(amplitude: AmplitudeImage, params: DistortionParams) -> AmplitudeImage:
    """Measured amplitude: superposed return strength averaged over the mixing window."""
    r = params.psf_radius
    a = amplitude.data.astype(np.float64)
    return AmplitudeImage(_box_sum(a, r) / _box_sum(np.ones_like(a), r))


def random_systematic_error(shape, rng: np.random.Generator) -> SystematicError:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    rad2 = ((xx - w / 2) ** 2 + (yy - h / 2) ** 2) / (max(h, w) / 2) ** 2
    a = 1.0 + 0.03 * rad2 + rng.uniform(-0.01, 0.01, shape)
    b = rng.uniform(-3.0, 3.0) + rng.uniform(-1.0, 1.0, shape)
    c = -12.0 * rad2 + rng.uniform(-4.0, 4.0, shape)
    return SystematicError(a, b, c)


def apply_systematic_error(true_range: RangeImage, amplitude: AmplitudeImage,
                           err: SystematicError) -> RangeImage:
    """Raw sensor reading whose affine calibration yields ``true_range``."""
    raw = (true_range.data.astype(np.float64) - err.b * amplitude.data - err.c) / err.a
    return RangeImage(np.maximum(raw, 0.0), true_range.valid_mask)


def generate_scanset(scene: Scene, n_scans: int, jitter_sigma: float, seed,
                     occlusion_rate: float = 0.5, occlusion_size: int = 8,
                     outlier_rate: float = 0.0) -> ScanSet:
    """Re-render ``scene`` ``n_scans`` times with jitter and random occlusion patches.

    Each scan has, with probability ``occlusion_rate``, one rectangular patch
    (up to ``occlusion_size`` px per side) marked invalid, placed next to an
    object edge where structured-light shadows occur. A fraction
    ``outlier_rate`` of pixels per scan reads 20-80 mm too far.
    """
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    rng = np.random.default_rng(seed)
    ref, _ = render_reference(scene)
    h, w = ref.shape
    scans = []
    for _ in range(n_scans):
        data = ref.data.astype(np.float64)
        if jitter_sigma > 0:
            data = data + rng.normal(0.0, jitter_sigma, size=data.shape)
        if outlier_rate > 0:
            far = rng.random(data.shape) < outlier_rate
            data = data + far * rng.uniform(20.0, 80.0, size=data.shape)
        mask = np.ones((h, w), dtype=bool)
        if occlusion_rate > 0 and scene.objects and rng.random() < occlusion_rate:
            x0, x1, y0, y1 = _footprint(scene.objects[rng.integers(len(scene.objects))])
            ph, pw = (int(v) for v in rng.integers(1, occlusion_size + 1, size=2))
            side = rng.integers(4)
            if side == 0:
                ys, xs = (y0, y1), (x0 - pw, x0)
            elif side == 1:
                ys, xs = (y0, y1), (x1, x1 + pw)
            elif side == 2:
                ys, xs = (y0 - ph, y0), (x0, x1)
            else:
                ys, xs = (y1, y1 + ph), (x0, x1)
            mask[max(ys[0], 0):max(ys[1], 0), max(xs[0], 0):max(xs[1], 0)] = False
        scans.append(RangeImage(np.maximum(data, 0.0), mask))
    return ScanSet(scans)


def fuse_values(values, cluster_radius: float, min_points: int) -> float | None:
    """Median of the closest single-linkage cluster, or None when missing."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return None
    splits = np.flatnonzero(np.diff(v) > cluster_radius) + 1
    clusters = np.split(v, splits)
    best = min(clusters, key=lambda c: c.mean())
    if best.size < min_points:
        return None
    return float(np.median(best))


def fuse_reference(scanset: ScanSet, cluster_radius: float = 10.0, min_points: int = 3) -> RangeImage:
    if not scanset.scans:
        raise ValueError("empty scan set")
    stack = np.stack([s.data for s in scanset.scans]).astype(np.float64)
    valid = np.stack([s.valid_mask for s in scanset.scans])
    h, w = stack.shape[1:]
    out = np.zeros((h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            r = fuse_values(stack[valid[:, y, x], y, x], cluster_radius, min_points)
            if r is not None:
                out[y, x] = r
                mask[y, x] = True
    return RangeImage(out, mask)


def random_scene(rng: np.random.Generator, width: int = 64, height: int = 64,
                 max_objects: int = 5, step_range=(20.0, 45.0)) -> Scene:
    """Random boxes on a platform, depths within the 150-400 mm envelope.

    Box heights above the platform are drawn from ``step_range`` (mm); boxes
    may overlap, so steps between box tops can be smaller.
    """
    platform = float(rng.uniform(220.0, 390.0))
    objects = []
    for _ in range(int(rng.integers(2, max_objects + 1))):
        hw = int(rng.integers(4, 15))
        hh = int(rng.integers(4, 15))
        cx = float(rng.integers(hw, width - hw + 1))
        cy = float(rng.integers(hh, height - hh + 1))
        top = float(max(150.0, platform - rng.uniform(*step_range)))
        objects.append(Box(cx, cy, float(hw), float(hh), top, float(rng.uniform(0.2, 1.0))))
    return Scene(width, height, platform, tuple(objects), float(rng.uniform(0.4, 1.0)))


@dataclass
class SimulatedCapture:
    scene: Scene
    reference: RangeImage
    clean: RangeImage
    amplitude: AmplitudeImage
    distorted: RangeImage
    raw: RangeImage


def capture(scene: Scene, params: DistortionParams, err: SystematicError, seed,
            n_scans: int = 30, jitter_sigma: float = 0.5, outlier_rate: float = 0.05,
            cluster_radius: float = 10.0, min_points: int = 3) -> SimulatedCapture:
    """One full synthetic capture: clean render, fused reference, distorted and raw ToF."""
    ss = np.random.SeedSequence(seed)
    s_noise, s_scan = ss.spawn(2)
    clean, amp = render_reference(scene)
    distorted = apply_multipath(clean, amp, params, np.random.default_rng(s_noise))
    measured_amp = mixed_amplitude(amp, params)
    raw = apply_systematic_error(distorted, measured_amp, err)
    scans = generate_scanset(scene, n_scans, jitter_sigma, s_scan, outlier_rate=outlier_rate)
    reference = fuse_reference(scans, cluster_radius, min_points)
    return SimulatedCapture(scene, reference, clean, measured_amp, distorted, raw)


def calibration_frames(shape, err: SystematicError, n_frames: int, seed,
                       noise_sigma: float = 1.0):
    """Flat-target frames for fitting the per-pixel calibration.

    Returns ``(raw, amplitude, true)`` arrays of shape ``(n, h, w)``.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    depths = np.linspace(160.0, 390.0, n_frames)
    raws, amps, trues = [], [], []
    for d in depths:
        refl = rng.uniform(0.2, 1.0)
        # brightness ramp across rows, as on the graded calibration target
        ramp = np.linspace(0.5, 1.0, h)[:, None] * np.ones((1, w))
        amp = refl * ramp / (d / REF_RANGE_MM) ** 2
        true = d + rng.normal(0.0, noise_sigma, size=shape)
        raw = (true - err.b * amp - err.c) / err.a
        raws.append(raw.astype(np.float32))
        amps.append(amp.astype(np.float32))
        trues.append(np.full(shape, d, dtype=np.float32))
    return np.stack(raws), np.stack(amps), np.stack(trues)


def scene_to_json(scene: Scene, params: DistortionParams, seed) -> str:
    doc = scene.to_dict()
    doc["distortion"] = asdict(params)
    doc["seed"] = seed
    return json.dumps(doc, indent=2, sort_keys=True)


def scene_from_json(text: str) -> tuple[Scene, DistortionParams, int | None]:
    doc = json.loads(text)
    params = DistortionParams(**doc.get("distortion", {}))
    return Scene.from_dict(doc), params, doc.get("seed")
