"""Boundary supervision (Canny on references) and the four oriented detectors.

Orientation groups quantise the edge *tangent* angle, measured in image
coordinates (x right, y down) modulo 180 degrees, into 45-degree bins
centred on 0, 45, 90 and 135 degrees:

    group 0: horizontal edge line     tangent (1, 0)
    group 1: tangent (1, 1)
    group 2: vertical edge line       tangent (0, 1)
    group 3: tangent (-1, 1)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encode import KIND_BOUNDARY, EncoderParams, SampleSet, encode_image
from .imagecore import AmplitudeImage, EdgeImage, Image, OrientationImage, RangeImage, read_image, write_image
from .mlp import BOUNDARY_SIZES, MlpModel, TrainConfig, boundary_net, forward, softmax, train
from .rangenet import decode_bundle, encode_bundle

log = logging.getLogger(__name__)

N_GROUPS = 4
# tangent direction (dx, dy) per group
TANGENTS = ((1, 0), (1, 1), (0, 1), (-1, 1))
# edge normal per group, used for NMS on detector scores
NORMALS = ((0, 1), (1, -1), (1, 0), (1, 1))
# NMS step along the gradient for each quantised gradient sector
_GRAD_STEPS = ((1, 0), (1, 1), (0, 1), (-1, 1))


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.0
    low: float = 2.0
    high: float = 6.0


@dataclass(eq=False)
class EdgeMap:
    """Binary edges plus per-pixel direction group and score.

    ``thin`` holds the NMS survivors (before hysteresis); ``direction`` is
    defined everywhere, ``orientation_group`` only on edge pixels (-1 elsewhere).
    """

    edge: np.ndarray
    direction: np.ndarray
    score: np.ndarray
    thin: np.ndarray | None = None

    def __post_init__(self):
        self.edge = np.asarray(self.edge, dtype=bool)
        self.direction = np.asarray(self.direction, dtype=np.int8)
        self.score = np.asarray(self.score, dtype=np.float64)
        self.thin = self.edge.copy() if self.thin is None else np.asarray(self.thin, dtype=bool)
        if not (self.edge.shape == self.direction.shape == self.score.shape == self.thin.shape):
            raise ValueError("edge map planes must share a shape")
        if np.any((self.score < 0) | (self.score > 1)):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def shape(self):
        return self.edge.shape

    @property
    def orientation_group(self) -> np.ndarray:
        return np.where(self.edge, self.direction, -1).astype(np.int8)

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape, bool), np.zeros(shape, np.int8), np.zeros(shape))

    @classmethod
    def from_edges(cls, edge, direction) -> EdgeMap:
        edge = np.asarray(edge, dtype=bool)
        return cls(edge, direction, edge.astype(np.float64))


def tangent_group(grad_angle_deg) -> np.ndarray:
    """Group index of the edge whose gradient points at ``grad_angle_deg``."""
    tangent = (np.asarray(grad_angle_deg, dtype=np.float64) + 90.0) % 180.0
    return (((tangent + 22.5) % 180.0) // 45.0).astype(np.int8)


def _shift(a: np.ndarray, dx: int, dy: int, fill=0.0) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside."""
    h, w = a.shape
    out = np.full_like(a, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = a[yd, xd]
    return out


def nms_along(mag: np.ndarray, step_index: np.ndarray, steps, sign=None) -> np.ndarray:
    """Keep pixels with ``m(p) >= m(p - d)`` and ``m(p) > m(p + d)``.

    ``d = steps[step_index[p]]``, optionally negated where ``sign < 0``.
    The asymmetric comparison thins plateaus of equal values to one pixel.
    """
    keep = np.zeros(mag.shape, dtype=bool)
    for k, (dx, dy) in enumerate(steps):
        fwd = _shift(mag, dx, dy)
        bwd = _shift(mag, -dx, -dy)
        sel = step_index == k
        if sign is None:
            ok = (mag >= bwd) & (mag > fwd)
        else:
            ok_pos = (mag >= bwd) & (mag > fwd)
            ok_neg = (mag >= fwd) & (mag > bwd)
            ok = np.where(sign >= 0, ok_pos, ok_neg)
        keep |= sel & ok
    return keep & (mag > 0)


def hysteresis(values: np.ndarray, candidates: np.ndarray, low: float, high: float) -> np.ndarray:
    """8-connected components of ``candidates & values >= low`` touching a ``>= high`` pixel."""
    weak = candidates & (values >= low)
    strong = weak & (values >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(values.shape, dtype=bool)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels]


def _fill_missing(img: Image) -> np.ndarray:
    data = img.data.astype(np.float64)
    if img.valid_mask.all() or not img.valid_mask.any():
        return data
    _, (iy, ix) = ndimage.distance_transform_edt(~img.valid_mask, return_indices=True)
    return data[iy, ix]


def canny(img: RangeImage, params: CannyParams = CannyParams()) -> EdgeMap:
    """Canny with thresholds in mm/px; missing pixels never become edges.

    The score plane is the gradient magnitude scaled by its maximum.
    """
    data = _fill_missing(img)
    smooth = ndimage.gaussian_filter(data, params.sigma, mode="nearest") if params.sigma > 0 else data
    gx = ndimage.sobel(smooth, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(smooth, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx))
    sector = (((angle % 180.0) + 22.5) % 180.0 // 45.0).astype(np.int8)
    # sign of the gradient relative to the sector's reference step
    steps = np.array(_GRAD_STEPS)
    sign = gx * steps[sector, 0] + gy * steps[sector, 1]
    thin = nms_along(mag, sector, _GRAD_STEPS, sign) & img.valid_mask
    edge = hysteresis(mag, thin, params.low, params.high)
    peak = mag.max()
    score = mag / peak if peak > 0 else np.zeros_like(mag)
    return EdgeMap(edge, tangent_group(angle), score, thin)


def gt_edges(reference: RangeImage, params: CannyParams = CannyParams()) -> EdgeMap:
    return canny(reference, params)


@dataclass
class BoundaryModelSet:
    encoder: EncoderParams
    nets: list[MlpModel]
    epoch_losses: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.nets) != N_GROUPS:
            raise ValueError("need exactly four detector networks")
        for net in self.nets:
            if net.layer_sizes != BOUNDARY_SIZES or net.head != "softmax2":
                raise ValueError(f"detector nets must be {BOUNDARY_SIZES} with a softmax head")


def boundary_inputs(inputs: np.ndarray, encoder: EncoderParams) -> np.ndarray:
    """Drop the one-hot blocks: detectors see ``[x_R | x_A]`` only."""
    return inputs[:, :2 * encoder.n_patch]


def build_boundary_dataset(triples, encoder: EncoderParams, canny_params: CannyParams = CannyParams(),
                           seed=0, neg_ratio: float = 3.0) -> list[SampleSet]:
    """Per-group sample sets; label 1 = edge of this group, 0 = anything else.

    Negatives for group g are every edge pixel of the other groups plus
    ``neg_ratio`` times as many non-edge pixels as g has positives, sampled
    without replacement.
    """
    rng = np.random.default_rng(seed)
    feats, groups = [], []
    for rng_img, amp, ref in triples:
        gt = gt_edges(ref, canny_params)
        inputs, ys, xs = encode_image(rng_img, amp, encoder, where=ref.valid_mask)
        feats.append(boundary_inputs(inputs, encoder))
        groups.append(np.where(gt.edge[ys, xs], gt.direction[ys, xs], -1))
    dim = 2 * encoder.n_patch
    feats = np.concatenate(feats) if feats else np.zeros((0, dim), np.float32)
    groups = np.concatenate(groups) if groups else np.zeros(0, np.int64)
    non_edge = np.flatnonzero(groups < 0)
    out = []
    for g in range(N_GROUPS):
        pos = np.flatnonzero(groups == g)
        other = np.flatnonzero((groups >= 0) & (groups != g))
        if pos.size == 0:
            log.warning("orientation group %d has no positive samples", g)
        n_neg = min(non_edge.size, int(round(neg_ratio * max(pos.size, 1))))
        neg = rng.choice(non_edge, size=n_neg, replace=False) if n_neg else non_edge[:0]
        idx = np.concatenate([pos, other, np.sort(neg)])
        labels = np.concatenate([np.ones(pos.size), np.zeros(other.size + neg.size)]).astype(np.float32)
        out.append(SampleSet(feats[idx], labels, KIND_BOUNDARY).shuffled(rng.integers(1 << 31)))
    return out


def train_boundary_nns(sample_sets, encoder: EncoderParams, config: TrainConfig) -> BoundaryModelSet:
    nets, losses = [], []
    for g, samples in enumerate(sample_sets):
        net = boundary_net(config.seed + g)
        if len(samples) == 0:
            log.warning("group %d: no samples, detector left untrained", g)
            nets.append(net)
            losses.append([])
            continue
        res = train(net, samples.inputs, samples.targets.astype(np.int64), config, "cross_entropy")
        nets.append(res.model)
        losses.append(res.epoch_losses)
    return BoundaryModelSet(encoder, nets, losses)


def group_scores(models: BoundaryModelSet, rng_img: RangeImage, amp: AmplitudeImage):
    """Edge probability of each detector, shape (4, h, w), and the eligibility mask."""
    inputs, ys, xs = encode_image(rng_img, amp, models.encoder)
    probs = np.zeros((N_GROUPS,) + rng_img.shape)
    eligible = np.zeros(rng_img.shape, dtype=bool)
    eligible[ys, xs] = True
    if len(ys):
        feats = boundary_inputs(inputs, models.encoder)
        for g, net in enumerate(models.nets):
            probs[g, ys, xs] = softmax(forward(net, feats))[:, 1]
    return probs, eligible


def fuse_max_response(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel max over groups and its argmax (lowest group wins ties)."""
    return probs.max(axis=0), probs.argmax(axis=0).astype(np.int8)


def nms_scores(score: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """NMS across the edge normal of each pixel's winning group."""
    return nms_along(score, direction, NORMALS)


def detect_boundaries(models: BoundaryModelSet, rng_img: RangeImage, amp: AmplitudeImage,
                      low: float = 0.3, high: float = 0.6) -> EdgeMap:
    if rng_img.shape != amp.shape:
        raise ValueError("range and amplitude shapes differ")
    probs, _ = group_scores(models, rng_img, amp)
    return edges_from_scores(probs, low, high)


def edges_from_scores(probs: np.ndarray, low: float = 0.3, high: float = 0.6) -> EdgeMap:
    score, direction = fuse_max_response(probs)
    thin = nms_scores(score, direction)
    edge = hysteresis(score, thin, low, high)
    return EdgeMap(edge, direction, np.clip(score, 0.0, 1.0), thin)


def save_boundary_models(models: BoundaryModelSet, directory, stem: str = "boundary") -> list[Path]:
    directory = Path(directory)
    paths = []
    for g, net in enumerate(models.nets):
        meta = {"role": "boundary", "group": g, "encoder": models.encoder.to_dict()}
        p = directory / f"{stem}_g{g}.tfr"
        p.write_bytes(encode_bundle(meta, net))
        paths.append(p)
    return paths


def load_boundary_models(directory, stem: str = "boundary") -> BoundaryModelSet:
    nets, encoder = [], None
    for g in range(N_GROUPS):
        meta, net = decode_bundle((Path(directory) / f"{stem}_g{g}.tfr").read_bytes())
        if meta.get("role") != "boundary" or meta.get("group") != g:
            raise ValueError(f"bundle for group {g} has wrong metadata")
        encoder = EncoderParams.from_dict(meta["encoder"])
        nets.append(net)
    return BoundaryModelSet(encoder, nets)


def edge_map_images(em: EdgeMap) -> tuple[EdgeImage, OrientationImage]:
    return (EdgeImage(em.edge.astype(np.float32)),
            OrientationImage(np.where(em.edge, em.direction, 0).astype(np.float32), em.edge))


def write_edge_map(em: EdgeMap, edge_path, orientation_path) -> None:
    e, o = edge_map_images(em)
    write_image(e, edge_path)
    write_image(o, orientation_path)


def read_edge_map(edge_path, orientation_path) -> EdgeMap:
    e = read_image(edge_path)
    o = read_image(orientation_path)
    if not isinstance(e, EdgeImage) or not isinstance(o, OrientationImage):
        raise ValueError("expected an edge image and an orientation image")
    edge = e.data > 0.5
    return EdgeMap.from_edges(edge, np.where(edge, o.data, 0).astype(np.int8))
