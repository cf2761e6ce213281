"""Accuracy curves, boundary-region masks and edge precision/recall."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .boundary import EdgeMap
from .imagecore import RangeImage


class EmptyRegionError(ValueError):
    pass


@dataclass
class AccuracyCurve:
    thresholds: np.ndarray
    fraction_correct: np.ndarray
    region: str = "all"
    n_pixels: int = 0

    def at(self, tau: float) -> float:
        i = np.flatnonzero(np.isclose(self.thresholds, tau))
        if i.size == 0:
            raise KeyError(f"threshold {tau} not on the curve")
        return float(self.fraction_correct[i[0]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["threshold_mm", "fraction_correct"])
        for t, f in zip(self.thresholds, self.fraction_correct):
            wr.writerow([f"{t:g}", f"{f:.6f}"])
        return buf.getvalue()


def accuracy_curve(est: RangeImage, ref: RangeImage, thresholds, region_mask=None,
                   region: str = "all") -> AccuracyCurve:
    """Fraction of evaluable pixels with ``|est - ref| < tau`` for each ``tau``.

    Evaluable: reference present and inside ``region_mask``. The estimate's
    own mask is ignored; pass it through ``region_mask`` to restrict further.
    """
    if est.shape != ref.shape:
        raise ValueError("estimate and reference shapes differ")
    mask = ref.valid_mask.copy()
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=bool)
        if region_mask.shape != ref.shape:
            raise ValueError("region mask shape differs")
        mask &= region_mask
    n = int(mask.sum())
    if n == 0:
        raise EmptyRegionError("no evaluable pixels")
    dev = np.abs(est.data[mask].astype(np.float64) - ref.data[mask].astype(np.float64))
    th = np.asarray(thresholds, dtype=np.float64)
    frac = np.array([(dev < t).sum() / n for t in th])
    return AccuracyCurve(th, frac, region, n)


def pooled_accuracy(pairs, thresholds, region: str = "all") -> AccuracyCurve:
    """Accuracy over the union of pixels from ``(est, ref, region_mask)`` triples."""
    th = np.asarray(thresholds, dtype=np.float64)
    hits = np.zeros(th.size)
    total = 0
    for est, ref, mask in pairs:
        try:
            c = accuracy_curve(est, ref, th, mask, region)
        except EmptyRegionError:
            continue
        hits += c.fraction_correct * c.n_pixels
        total += c.n_pixels
    if total == 0:
        raise EmptyRegionError("no evaluable pixels in any image")
    return AccuracyCurve(th, hits / total, region, total)


def boundary_region_mask(gt, margin: int = 5) -> np.ndarray:
    """Pixels within Chebyshev distance ``margin`` of a ground-truth edge pixel."""
    edge = gt.edge if isinstance(gt, EdgeMap) else np.asarray(gt, dtype=bool)
    if not edge.any():
        return np.zeros(edge.shape, dtype=bool)
    return ndimage.binary_dilation(edge, structure=np.ones((2 * margin + 1,) * 2, dtype=bool))


def match_edges(pred: np.ndarray, gt: np.ndarray, tolerance: float) -> int:
    """Greedy one-to-one matching, nearest pairs first; returns the match count.

    Pairs within Euclidean ``tolerance`` are visited by distance, then by the
    smaller and larger of the two pixel indices, which keeps the count
    symmetric in its arguments.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    h, w = pred.shape
    r = int(np.floor(tolerance))
    pidx = np.flatnonzero(pred)
    if pidx.size == 0 or not gt.any():
        return 0
    py, px = np.divmod(pidx, w)
    cand = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d2 = dx * dx + dy * dy
            if d2 > tolerance * tolerance:
                continue
            qy, qx = py + dy, px + dx
            ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
            ok[ok] &= gt[qy[ok], qx[ok]]
            q = qy[ok] * w + qx[ok]
            cand.append(np.stack([np.full(q.size, d2), pidx[ok], q], axis=1))
    if not cand:
        return 0
    pairs = np.concatenate(cand)
    lo = np.minimum(pairs[:, 1], pairs[:, 2])
    hi = np.maximum(pairs[:, 1], pairs[:, 2])
    order = np.lexsort((hi, lo, pairs[:, 0]))
    used_p, used_g = set(), set()
    for d2, p, q in pairs[order]:
        if p not in used_p and q not in used_g:
            used_p.add(p)
            used_g.add(q)
    return len(used_p)


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.f1)) if self.f1.size else 0

    @property
    def best_f1(self) -> float:
        return float(self.f1.max()) if self.f1.size else 0.0

    @property
    def best_threshold(self) -> float:
        return float(self.thresholds[self.best_index])


def _pr_point(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def edge_pr(pred: EdgeMap, gt, match_tolerance: float = 2.0, thresholds=None) -> PrCurve:
    """Precision/recall of thresholded edge candidates against ground-truth edges.

    Candidates are ``pred.thin`` (NMS survivors); at threshold ``tau`` the
    predicted set is candidates with ``score >= tau``. An empty prediction has
    precision 1 by convention.
    """
    return pooled_edge_pr([(pred, gt)], match_tolerance, thresholds)


def pooled_edge_pr(pairs, match_tolerance: float = 2.0, thresholds=None) -> PrCurve:
    pairs = [(p, g.edge if isinstance(g, EdgeMap) else np.asarray(g, dtype=bool)) for p, g in pairs]
    for p, g in pairs:
        if p.shape != g.shape:
            raise ValueError("prediction and ground truth shapes differ")
    if thresholds is None:
        vals = np.concatenate([p.score[p.thin] for p, _ in pairs]) if pairs else np.zeros(0)
        thresholds = np.unique(np.concatenate([np.quantile(vals, np.linspace(0, 1, 51)), [1.0]])) \
            if vals.size else np.array([1.0])
    th = np.asarray(thresholds, dtype=np.float64)
    prec, rec, f1 = [], [], []
    for t in th:
        tp = n_pred = n_gt = 0
        for p, g in pairs:
            sel = p.thin & (p.score >= t)
            tp += match_edges(sel, g, match_tolerance)
            n_pred += int(sel.sum())
            n_gt += int(g.sum())
        a, b, c = _pr_point(tp, n_pred, n_gt)
        prec.append(a)
        rec.append(b)
        f1.append(c)
    return PrCurve(th, np.array(prec), np.array(rec), np.array(f1))


def binary_pr(pred, gt, match_tolerance: float = 2.0) -> tuple[float, float, float]:
    """Single operating point for two binary edge maps: (precision, recall, F1)."""
    pred = pred.edge if isinstance(pred, EdgeMap) else np.asarray(pred, dtype=bool)
    gt = gt.edge if isinstance(gt, EdgeMap) else np.asarray(gt, dtype=bool)
    tp = match_edges(pred, gt, match_tolerance)
    return _pr_point(tp, int(pred.sum()), int(gt.sum()))
