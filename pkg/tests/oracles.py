"""Independent brute-force reference implementations used by the tests."""

import math
from itertools import combinations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from tofdenoise.boundary import TANGENTS, EdgeMap
from tofdenoise.mlp import backward, boundary_net, forward, range_net, sample_losses


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def _connected(block, radius):
    """Single-linkage connectivity: graph with edges between values within radius."""
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in range(len(block)):
            if j not in seen and abs(block[i] - block[j]) <= radius:
                seen.add(j)
                stack.append(j)
    return len(seen) == len(block)


def fuse_oracle(values, radius, min_points):
    """Enumerate every partition; keep the single-linkage one, pick the min-mean cluster."""
    values = [float(v) for v in values]
    if not values:
        return None
    found = None
    for part in set_partitions(values):
        if not all(_connected(b, radius) for b in part):
            continue
        if any(abs(a - b) <= radius for b1, b2 in combinations(part, 2) for a in b1 for b in b2):
            continue
        found = part
        break
    assert found is not None
    best = min(found, key=lambda b: sum(b) / len(b))
    if len(best) < min_points:
        return None
    return float(np.median(best))


def grid_graph(geo_graph):
    """Sparse matrix of single-move costs, built from GeoGraph.cost over all pixel pairs."""
    h, w = geo_graph.height, geo_graph.width
    rows, cols, vals = [], [], []
    for y in range(h):
        for x in range(w):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if (dx, dy) == (0, 0):
                        continue
                    qx, qy = x + dx, y + dy
                    if 0 <= qx < w and 0 <= qy < h:
                        c = geo_graph.cost((x, y), (qx, qy))
                        if math.isfinite(c):
                            rows.append(y * w + x)
                            cols.append(qy * w + qx)
                            vals.append(c)
    return csr_matrix((vals, (rows, cols)), shape=(h * w, h * w))


def knn_oracle(dist_row, k):
    """K nearest by (distance rounded to 1e-9, row-major index) from a full distance row."""
    idx = [i for i in range(len(dist_row)) if math.isfinite(dist_row[i])]
    idx.sort(key=lambda i: (round(dist_row[i], 9), i))
    return idx[:k]


def all_pairs(geo_graph):
    return dijkstra(grid_graph(geo_graph), directed=True)


def relu_pattern(model, x):
    """Sign pattern of every hidden pre-activation, computed independently."""
    a = np.asarray(x, dtype=np.float64)
    pats = []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w.T + b
        pats.append(z > 0)
        a = np.maximum(z, 0)
    return np.concatenate(pats, axis=1)


def fd_per_sample_grads(model, x, target, kind, eps=1e-4):
    """Central differences of every per-sample loss w.r.t. every parameter.

    Returns ``(grads, valid)``: lists shaped like ``model.params()`` with a
    leading sample axis. ``valid`` is False where the +/-eps probes put some
    hidden ReLU on a different side of its kink than the base point, since a
    difference quotient across a kink is not a derivative.
    """
    base = relu_pattern(model, x)
    grads, valid = [], []
    for p in model.params():
        g = np.zeros((len(x),) + p.shape)
        ok = np.ones((len(x),) + p.shape, dtype=bool)
        flat = p.reshape(-1)
        gflat = g.reshape(len(x), -1)
        okflat = ok.reshape(len(x), -1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            lp = sample_losses(forward(model, x), target, kind)
            same = np.all(relu_pattern(model, x) == base, axis=1)
            flat[k] = old - eps
            lm = sample_losses(forward(model, x), target, kind)
            same &= np.all(relu_pattern(model, x) == base, axis=1)
            flat[k] = old
            gflat[:, k] = (lp - lm) / (2 * eps)
            okflat[:, k] = same
        grads.append(g)
        valid.append(ok)
    return grads, valid


def max_relative_gradient_error(model, x, target, kind):
    fd, valid = fd_per_sample_grads(model, x, target, kind)
    worst = 0.0
    n_checked = n_skipped = 0
    for i in range(len(x)):
        gw, gb, _ = backward(model, x[i:i + 1], target[i:i + 1], kind)
        for a, n, ok in zip(gw + gb, fd, valid):
            n, ok = n[i], ok[i]
            mag = np.maximum(np.abs(a), np.abs(n))
            sel = (mag > 1e-8) & ok
            n_checked += int(sel.sum())
            n_skipped += int(((mag > 1e-8) & ~ok).sum())
            if sel.any():
                worst = max(worst, float((np.abs(a - n)[sel] / mag[sel]).max()))
    return worst, n_checked, n_skipped


def gradient_check(arch: str, n_inputs=50, seed=0):
    rng = np.random.default_rng(seed)
    if arch == "range":
        model = range_net(seed)
        model.biases = [rng.normal(0, 0.1, b.shape) for b in model.biases]
        x = rng.uniform(-0.5, 0.5, (n_inputs, 280))
        t = rng.normal(0, 1, (n_inputs, 1))
        return max_relative_gradient_error(model, x, t, "euclidean")
    model = boundary_net(seed)
    model.biases = [rng.normal(0, 0.1, b.shape) for b in model.biases]
    x = rng.uniform(-0.5, 0.5, (n_inputs, 240))
    t = rng.integers(0, 2, n_inputs)
    return max_relative_gradient_error(model, x, t, "cross_entropy")


def random_edge_map(rng, shape=(24, 24), n_lines=4, noise=0.03):
    """Random straight segments with their true tangent group, plus scattered edge pixels."""
    h, w = shape
    edge = np.zeros(shape, bool)
    direction = rng.integers(0, 4, shape).astype(np.int8)
    for _ in range(n_lines):
        g = int(rng.integers(4))
        tx, ty = TANGENTS[g]
        x, y = int(rng.integers(w)), int(rng.integers(h))
        for _ in range(int(rng.integers(4, max(h, w)))):
            if not (0 <= x < w and 0 <= y < h):
                break
            edge[y, x] = True
            direction[y, x] = g
            x, y = x + tx, y + ty
    edge |= rng.random(shape) < noise
    return EdgeMap.from_edges(edge, direction)


__all__ = ["fuse_oracle", "grid_graph", "knn_oracle", "all_pairs", "gradient_check", "random_edge_map"]
