"""Edge-aware geodesic neighbourhoods and the geodesic range filter.

The grid is 8-connected: axial moves cost ``step_cost``, diagonal moves
``step_cost * sqrt(2)``. Edge pixels act as walls:

* a move between an edge pixel and a non-edge pixel is blocked;
* a move between two edge pixels is allowed only along both pixels' edge
  tangent, so an edge line is smoothed along itself and nowhere else;
* a diagonal move is blocked when both two-step detours through its corner
  pixels are blocked (no leaking through the corner of a diagonal wall).

Non-edge pixels are then effectively 4-connected, which makes every
8-connected edge curve watertight.

Path lengths are tracked as integer counts of axial and diagonal moves, so
equal-length paths always produce the same floating-point distance.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .boundary import TANGENTS, EdgeMap
from .imagecore import RangeImage

SQRT2 = math.sqrt(2.0)
_MOVES = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))


@dataclass(frozen=True)
class GeoNeighbors:
    """Neighbours of one pixel, ascending by distance then row-major index."""

    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


class GeoGraph:
    """Adjacency of the blocked 8-connected grid for one edge map."""

    def __init__(self, edge, direction=None, step_cost: float = 1.0):
        if isinstance(edge, EdgeMap):
            edge, direction = edge.edge, edge.direction
        self.edge = np.asarray(edge, dtype=bool)
        if direction is None:
            direction = np.zeros(self.edge.shape, dtype=np.int8)
        self.direction = np.asarray(direction, dtype=np.int8)
        if self.direction.shape != self.edge.shape:
            raise ValueError("edge and direction planes differ in shape")
        if not step_cost > 0:
            raise ValueError("step_cost must be positive")
        self.step_cost = float(step_cost)
        self.height, self.width = self.edge.shape
        self.adjacency = self._build()

    def _pair_ok(self, x0, y0, x1, y1) -> bool:
        e0, e1 = self.edge[y0, x0], self.edge[y1, x1]
        if not (e0 or e1):
            return True
        if e0 != e1:
            return False
        d = (x1 - x0, y1 - y0)
        for x, y in ((x0, y0), (x1, y1)):
            tx, ty = TANGENTS[self.direction[y, x]]
            if d != (tx, ty) and d != (-tx, -ty):
                return False
        return True

    def move_allowed(self, x0, y0, x1, y1) -> bool:
        if not self._pair_ok(x0, y0, x1, y1):
            return False
        if x0 != x1 and y0 != y1:
            via_a = self._pair_ok(x0, y0, x1, y0) and self._pair_ok(x1, y0, x1, y1)
            via_b = self._pair_ok(x0, y0, x0, y1) and self._pair_ok(x0, y1, x1, y1)
            if not (via_a or via_b):
                return False
        return True

    def _build(self):
        """Per pixel: list of ``(neighbour_index, is_diagonal)``."""
        h, w = self.height, self.width
        adj = []
        for y in range(h):
            for x in range(w):
                nbrs = []
                for dx, dy in _MOVES:
                    qx, qy = x + dx, y + dy
                    if 0 <= qx < w and 0 <= qy < h and self.move_allowed(x, y, qx, qy):
                        nbrs.append((qy * w + qx, dx != 0 and dy != 0))
                adj.append(nbrs)
        return adj

    def cost(self, p, q) -> float:
        """Single-move cost between pixels ``(x, y)``; ``inf`` if blocked or not adjacent."""
        (x0, y0), (x1, y1) = p, q
        if max(abs(x1 - x0), abs(y1 - y0)) != 1 or not self.move_allowed(x0, y0, x1, y1):
            return math.inf
        return self.step_cost * (SQRT2 if x0 != x1 and y0 != y1 else 1.0)

    def index(self, x, y) -> int:
        return y * self.width + x


def geodesic_knn(graph: GeoGraph, p, k: int = 81) -> GeoNeighbors:
    """The ``k`` nearest pixels to ``p = (x, y)`` by shortest-path length.

    Dijkstra halted after ``k`` settled nodes; ties settle in row-major order.
    ``p`` itself comes first at distance 0.
    """
    x, y = p
    if not (0 <= x < graph.width and 0 <= y < graph.height):
        raise IndexError(f"pixel {p} outside the {graph.width}x{graph.height} grid")
    s = graph.step_cost
    adj = graph.adjacency
    src = y * graph.width + x
    heap = [(0.0, src, 0, 0)]
    best = {src: 0.0}
    done = set()
    idx, dist = [], []
    while heap and len(idx) < k:
        d, u, na, nd = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        idx.append(u)
        dist.append(d)
        for v, diag in adj[u]:
            if v in done:
                continue
            a, b = (na, nd + 1) if diag else (na + 1, nd)
            dv = s * (a + b * SQRT2)
            if dv < best.get(v, math.inf):
                best[v] = dv
                heapq.heappush(heap, (dv, v, a, b))
    return GeoNeighbors(np.array(idx, dtype=np.int64), np.array(dist, dtype=np.float64))


def geo_weight(d, sigma: float = 2.0):
    """Gaussian of geodesic distance; infinite distance maps to 0."""
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    w = np.where(np.isinf(d), 0.0, w)
    return float(w) if w.ndim == 0 else w


def geodesic_filter(r_f: RangeImage, edge_map: EdgeMap, k: int = 81, sigma: float = 2.0,
                    step_cost: float = 1.0, graph: GeoGraph | None = None,
                    return_counts: bool = False):
    """Weighted mean of ``R_F`` over each pixel's geodesic neighbours.

    Pixels outside ``r_f.valid_mask`` (ineligible) neither receive a filtered
    value (they pass through) nor contribute to others. With
    ``return_counts`` also returns the per-pixel number of contributing
    neighbours.
    """
    if r_f.shape != edge_map.shape:
        raise ValueError(f"range image {r_f.shape} and edge map {edge_map.shape} differ")
    if k < 1 or sigma <= 0:
        raise ValueError("need k >= 1 and sigma > 0")
    graph = graph or GeoGraph(edge_map, step_cost=step_cost)
    h, w = r_f.shape
    vals = r_f.data.astype(np.float64).ravel()
    ok = r_f.valid_mask.ravel()
    out = vals.copy()
    counts = np.zeros(h * w, dtype=np.int32)
    for p in np.flatnonzero(ok):
        nb = geodesic_knn(graph, (p % w, p // w), k)
        use = ok[nb.indices]
        q = nb.indices[use]
        wts = geo_weight(nb.distances[use], sigma)
        counts[p] = q.size
        # offset by the centre value so constant neighbourhoods return it exactly
        out[p] = vals[p] + np.dot(wts, vals[q] - vals[p]) / wts.sum()
    result = RangeImage(out.reshape(h, w), r_f.valid_mask)
    if return_counts:
        return result, counts.reshape(h, w)
    return result
