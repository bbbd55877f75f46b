"""Independent brute-force oracles used to freeze expected test values.

Everything here is deliberately written as plain loops over numpy arrays so
it shares no code path with the package implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np


def sq_dist_matrix(tokens: np.ndarray) -> np.ndarray:
    n = len(tokens)
    d2 = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            diff = tokens[i] - tokens[j]
            d2[i, j] = np.sum(diff * diff)
    return d2


def dpc_oracle(tokens: np.ndarray, n_clusters: int, knn_k: int) -> dict:
    """Reference density-peak clustering on one token set.

    Definitions: rho_i = exp(-mean squared distance to the knn_k nearest
    neighbors, self excluded, ties by ascending index); xi_i = squared
    distance to the nearest token earlier in the (rho desc, index asc) order,
    or the max squared distance for the top-ranked token; centers are the
    n_clusters best (rho*xi, index asc) tokens with cluster ids ordered by
    ascending center index; every other token inherits its nearest
    higher-ranked token's cluster in rank order, except a non-center
    top-ranked token, which joins its nearest center.
    """
    n = len(tokens)
    d2 = sq_dist_matrix(tokens)

    rho = np.zeros(n)
    for i in range(n):
        neighbors = sorted((j for j in range(n) if j != i), key=lambda j: (d2[i, j], j))[:knn_k]
        rho[i] = np.exp(-np.float64(sum(d2[i, j] for j in neighbors) / knn_k))

    rank = sorted(range(n), key=lambda i: (-rho[i], i))
    xi = np.zeros(n)
    for pos, i in enumerate(rank):
        if pos == 0:
            xi[i] = max((d2[i, j] for j in range(n) if j != i), default=0.0)
        else:
            xi[i] = min(d2[i, j] for j in rank[:pos])

    score = rho * xi
    centers = sorted(sorted(range(n), key=lambda i: (-score[i], i))[:n_clusters])
    cluster_of = {c: k for k, c in enumerate(centers)}

    assignment = [-1] * n
    for pos, i in enumerate(rank):
        if i in cluster_of:
            assignment[i] = cluster_of[i]
        elif pos == 0:
            nearest = min(centers, key=lambda c: (d2[i, c], c))
            assignment[i] = cluster_of[nearest]
        else:
            parent = min(rank[:pos], key=lambda j: (d2[i, j], j))
            assignment[i] = assignment[parent]

    return {
        "dist2": d2,
        "rho": rho,
        "xi": xi,
        "score": score,
        "centers": np.array(centers),
        "assignment": np.array(assignment),
    }


def cindex_oracle(risks, times, events) -> float:
    """Exhaustive pair enumeration of the concordance index."""
    concordant = 0.0
    comparable = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if i == j or not events[i] or not (times[i] < times[j]):
                continue
            comparable += 1
            if risks[i] > risks[j]:
                concordant += 1.0
            elif risks[i] == risks[j]:
                concordant += 0.5
    if comparable == 0:
        raise ValueError("no comparable pairs")
    return concordant / comparable


def percentile_oracle(values, q: float) -> float:
    """Linear-interpolation percentile, written out explicitly."""
    s = sorted(float(v) for v in values)
    pos = q / 100.0 * (len(s) - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    if frac == 0:
        return s[lo]
    return s[lo] + frac * (s[lo + 1] - s[lo])


def quartile_bins_oracle(times) -> np.ndarray:
    bounds = [percentile_oracle(times, q) for q in (25, 50, 75)]
    bins = []
    for t in times:
        bins.append(sum(1 for b in bounds if t > b))
    return np.array(bins)


def bilinear_oracle(grid: np.ndarray, point: tuple[float, float]) -> np.ndarray:
    """4-term interpolation of one point on an (h, w, c) grid."""
    h, w, _ = grid.shape
    y = min(max(point[0], -1.0), 1.0)
    x = min(max(point[1], -1.0), 1.0)
    r = (y + 1) / 2 * (h - 1)
    c = (x + 1) / 2 * (w - 1)
    r0 = min(int(math.floor(r)), max(h - 2, 0))
    c0 = min(int(math.floor(c)), max(w - 2, 0))
    r1 = min(r0 + 1, h - 1)
    c1 = min(c0 + 1, w - 1)
    wr = r - r0
    wc = c - c0
    return (
        (1 - wr) * (1 - wc) * grid[r0, c0]
        + (1 - wr) * wc * grid[r0, c1]
        + wr * (1 - wc) * grid[r1, c0]
        + wr * wc * grid[r1, c1]
    )


def softmax_oracle(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mha_oracle(attn_module, queries: np.ndarray, keys_values: np.ndarray) -> np.ndarray:
    """Multi-head attention recomputed in numpy from a module's weights."""
    wq = attn_module.w_q.weight.detach().numpy()
    wk = attn_module.w_k.weight.detach().numpy()
    wv = attn_module.w_v.weight.detach().numpy()
    wo = attn_module.w_o.weight.detach().numpy()
    bo = attn_module.w_o.bias.detach().numpy()
    n_heads = attn_module.n_heads
    dh = attn_module.head_dim

    q = queries @ wq.T
    k = keys_values @ wk.T
    v = keys_values @ wv.T
    outs = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        attn = softmax_oracle(logits)
        outs.append(attn @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo.T + bo


def finite_diff(f, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x0)
    for i in range(len(x0)):
        hi = x0.copy()
        lo = x0.copy()
        hi[i] += eps
        lo[i] -= eps
        g[i] = (f(hi) - f(lo)) / (2 * eps)
    return g


def lstsq_probe_accuracy(features: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Closed-form least-squares one-hot probe, evaluated on its own data."""
    x = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    onehot = np.eye(n_classes)[labels]
    coef, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    preds = (x @ coef).argmax(axis=1)
    return float((preds == labels).mean())
