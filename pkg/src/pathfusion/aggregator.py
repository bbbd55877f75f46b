"""Slide-only student: deformable self-attention and density-peak token merging.

Tokens attend over a small deformed resampling of their own grid, then get
grouped by density-peak clustering with k-nearest-neighbor densities and
merged into significance-weighted prototypes. Clustering is a discrete
structure: gradients flow through token features and significance weights
only, never through the assignment itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .deform import MultiHeadAttention, OffsetNetwork, bilinear_sample, uniform_reference_grid
from .objectives import dual_expert_combine


def pairwise_sq_dists(tokens: torch.Tensor) -> torch.Tensor:
    """Symmetric matrix of squared Euclidean distances, zero diagonal.

    Computed as elementwise squared differences reduced over the feature
    axis by numpy's standard reduction, row-chunked to bound memory. One
    arithmetic path regardless of problem size keeps results reproducible.
    """
    if tokens.ndim != 2:
        raise ValueError(f"expected (N, c) tokens, got {tuple(tokens.shape)}")
    t = tokens.detach().numpy()
    n = t.shape[0]
    out = np.empty((n, n), dtype=t.dtype)
    chunk = max(1, (1 << 22) // max(1, n * t.shape[1]))
    # Upper triangle only, mirrored after: (x - y)^2 and (y - x)^2 are
    # bitwise identical, so symmetry is exact.
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = t[start:stop, None, :] - t[None, start:, :]
        np.multiply(block, block, out=block)
        upper = block.sum(axis=-1)
        out[start:stop, start:] = upper
        out[start:, start:stop] = upper.T
    return torch.from_numpy(out)


def local_density(dist2: torch.Tensor, k: int) -> torch.Tensor:
    """rho_i = exp(-mean squared distance to the k nearest neighbors).

    Self is excluded; ties in neighbor selection break by ascending index.
    Clustering is a discrete structure outside autograd, so the arithmetic
    runs through one canonical float64 numpy path.
    """
    n = dist2.shape[0]
    if dist2.ndim != 2 or dist2.shape[1] != n:
        raise ValueError("dist2 must be square")
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, N-1], got k={k} for N={n}")
    d2 = dist2.detach().numpy()
    masked = d2.copy()
    np.fill_diagonal(masked, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")[:, :k]
    knn_d2 = np.take_along_axis(d2, order, axis=1)
    rho = np.exp(-knn_d2.mean(axis=1))
    return torch.from_numpy(rho).to(dist2.dtype)


def _density_rank_positions(rho: np.ndarray) -> np.ndarray:
    """Total order over tokens: descending density, ascending index on ties."""
    order = np.argsort(-rho, kind="stable")
    pos = np.empty(len(rho), dtype=np.int64)
    pos[order] = np.arange(len(rho))
    return pos


def relative_distance(dist2: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """xi per token: squared distance to the nearest higher-ranked token.

    The globally top-ranked token instead takes its maximum squared distance
    to any other token (0 for a singleton input).
    """
    n = len(rho)
    if dist2.shape != (n, n):
        raise ValueError("dist2 and rho sizes disagree")
    if n == 1:
        return torch.zeros(1, dtype=dist2.dtype, device=dist2.device)
    d2 = dist2.detach().numpy().astype(np.float64, copy=False)
    pos = _density_rank_positions(rho.detach().numpy())
    higher = pos[None, :] < pos[:, None]  # higher[i, j]: j outranks i
    masked = np.where(higher, d2, np.inf)
    xi = masked.min(axis=1)
    top = int(np.nonzero(pos == 0)[0][0])
    xi[top] = d2[top].max()
    return torch.from_numpy(xi).to(dist2.dtype)


def select_centers_and_assign(
    rho: torch.Tensor, xi: torch.Tensor, dist2: torch.Tensor, n_clusters: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick the K highest-scoring tokens as centers and propagate clusters.

    Scores are rho * xi with ties broken by ascending index. Cluster ids are
    positions in the ascending-index-sorted center list. Every non-center
    token joins the cluster of its nearest higher-ranked token (distance
    ties toward the lower index, resolved in descending rank order); a
    non-center token with no higher-ranked token joins its nearest center.
    """
    n = len(rho)
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= K <= N, got K={n_clusters}, N={n}")
    rho_np = rho.detach().numpy().astype(np.float64, copy=False)
    xi_np = xi.detach().numpy().astype(np.float64, copy=False)
    d2 = dist2.detach().numpy().astype(np.float64, copy=False)

    scores = rho_np * xi_np
    by_score = np.argsort(-scores, kind="stable")
    centers = np.sort(by_score[:n_clusters])  # ascending token index

    pos = _density_rank_positions(rho_np)
    higher = pos[None, :] < pos[:, None]
    masked = np.where(higher, d2, np.inf)
    # argmin returns the first occurrence: distance ties resolve toward the
    # lower token index.
    parent = np.argmin(masked, axis=1)

    rank_order = np.argsort(pos)
    cluster_of = np.full(n, -1, dtype=np.int64)
    cluster_of[centers] = np.arange(n_clusters)
    assignment = np.full(n, -1, dtype=np.int64)
    for rank, tok in enumerate(rank_order):
        if cluster_of[tok] >= 0:
            assignment[tok] = cluster_of[tok]
        elif rank == 0:
            # The top-ranked token has no higher-ranked parent; if it is not
            # itself a center it joins its nearest center.
            nearest = centers[np.argmin(d2[tok, centers])]
            assignment[tok] = cluster_of[nearest]
        else:
            assignment[tok] = assignment[parent[tok]]
    return torch.from_numpy(centers), torch.from_numpy(assignment)


@dataclass
class ClusterResult:
    """Full output of one density-peak clustering pass."""

    rho: torch.Tensor  # (N,)
    xi: torch.Tensor  # (N,)
    score: torch.Tensor  # (N,)
    centers: torch.Tensor  # (K,) token indices, ascending
    assignment: torch.Tensor  # (N,) cluster ids in {0..K-1}
    omega: torch.Tensor | None = None  # (N,) significance weights
    prototypes: torch.Tensor | None = None  # (K, c)


def cluster_tokens(tokens: torch.Tensor, n_clusters: int, knn_k: int) -> ClusterResult:
    """Run the full DPC-KNN pass on one token set (no gradients)."""
    with torch.no_grad():
        dist2 = pairwise_sq_dists(tokens)
        rho = local_density(dist2, knn_k)
        xi = relative_distance(dist2, rho)
        centers, assignment = select_centers_and_assign(rho, xi, dist2, n_clusters)
    return ClusterResult(rho=rho, xi=xi, score=rho * xi, centers=centers, assignment=assignment)


def significance_and_merge(
    tokens: torch.Tensor,
    assignment: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    n_clusters: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Merge each cluster into its significance-weighted mean token.

    omega_i = sigmoid(w . z_i + b) in (0, 1); prototypes are convex
    combinations of their members, so gradients reach tokens and the
    significance parameters while the assignment stays fixed.
    """
    omega = torch.sigmoid(tokens @ weight.reshape(-1) + bias)
    c = tokens.shape[1]
    denom = tokens.new_zeros(n_clusters).index_add(0, assignment, omega)
    assert bool((denom > 0).all()), "empty cluster: assignment does not cover all ids"
    num = tokens.new_zeros(n_clusters, c).index_add(0, assignment, omega.unsqueeze(1) * tokens)
    return omega, num / denom.unsqueeze(1)


class DeformableSelfAttention(nn.Module):
    """Slide tokens attend over a deformed resampling of their own grid."""

    def __init__(self, dim: int, n_heads: int, ref_grid: int, offset_scale: float):
        super().__init__()
        self.ref_grid = ref_grid
        self.offset_net = OffsetNetwork(dim, ref_grid, ref_grid, scale=offset_scale)
        self.attn = MultiHeadAttention(dim, n_heads)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, h, w, dim) -> token outputs (B, h*w, dim) and attention maps."""
        if feats.ndim != 4:
            raise ValueError(f"expected (B, h, w, dim) features, got {tuple(feats.shape)}")
        b, h, w, dim = feats.shape
        offsets = self.offset_net(feats)
        ref = uniform_reference_grid(self.ref_grid, self.ref_grid, dtype=feats.dtype, device=feats.device)
        points = (ref.unsqueeze(0) + offsets).view(b, -1, 2)
        sampled = bilinear_sample(feats, points)
        return self.attn(feats.reshape(b, h * w, dim), sampled)


class AttentionPool(nn.Module):
    """Gated attention pooling of prototype tokens into one vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.gate = nn.Linear(dim, dim)
        self.score = nn.Linear(dim, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        alpha = torch.softmax(self.score(torch.tanh(self.gate(tokens))), dim=1)
        return (alpha * tokens).sum(dim=1)


@dataclass
class StudentOutput:
    logits: torch.Tensor  # (B, n_out) dual-expert combined
    logits10: torch.Tensor
    logits20: torch.Tensor
    rep: torch.Tensor  # (B, target_width) distillation-side representation
    pooled: dict[str, torch.Tensor]  # per magnification (B, dim)
    prototypes: dict[str, torch.Tensor]  # per magnification (B, K, dim)
    assignments: dict[str, torch.Tensor]  # per magnification (B, N) cluster ids
    omegas: dict[str, torch.Tensor]  # per magnification (B, N)


class SlideStudent(nn.Module):
    """Slide-only model over both magnifications with one parameter set."""

    def __init__(
        self,
        slide_channels: int,
        n_out: int,
        dim: int = 128,
        n_heads: int = 4,
        query_grid: int = 4,
        offset_scale: float = 0.5,
        n_clusters: int = 8,
        knn_k: int = 5,
        target_width: int = 256,
    ):
        super().__init__()
        self.n_clusters = n_clusters
        self.knn_k = knn_k
        self.adapter = nn.Linear(slide_channels, dim)
        self.deform_attn = DeformableSelfAttention(dim, n_heads, query_grid, offset_scale)
        self.significance = nn.Linear(dim, 1)
        self.pool = AttentionPool(dim)
        self.head = nn.Linear(dim, n_out)
        self.gate = nn.Parameter(torch.zeros(()))
        self.rep_proj = nn.Linear(dim, target_width)

    def _aggregate(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        feats = self.adapter(grid)
        z, _ = self.deform_attn(feats)  # (B, N, dim)
        protos, assigns, omegas = [], [], []
        for b in range(z.shape[0]):
            result = cluster_tokens(z[b].detach(), self.n_clusters, self.knn_k)
            omega, proto = significance_and_merge(
                z[b], result.assignment, self.significance.weight, self.significance.bias, self.n_clusters
            )
            protos.append(proto)
            assigns.append(result.assignment)
            omegas.append(omega)
        prototypes = torch.stack(protos)
        pooled = self.pool(prototypes)
        return pooled, prototypes, torch.stack(assigns), torch.stack(omegas)

    def forward(self, grid10: torch.Tensor, grid20: torch.Tensor) -> StudentOutput:
        pooled, prototypes, assignments, omegas = {}, {}, {}, {}
        for mag, grid in (("10", grid10), ("20", grid20)):
            pooled[mag], prototypes[mag], assignments[mag], omegas[mag] = self._aggregate(grid)
        logits10 = self.head(pooled["10"])
        logits20 = self.head(pooled["20"])
        return StudentOutput(
            logits=dual_expert_combine(logits10, logits20, self.gate),
            logits10=logits10,
            logits20=logits20,
            rep=self.rep_proj((pooled["10"] + pooled["20"]) / 2),
            pooled=pooled,
            prototypes=prototypes,
            assignments=assignments,
            omegas=omegas,
        )
