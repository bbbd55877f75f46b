"""Cross-magnification attention consistency and the diagonal-variance loss.

Flattened gene-to-slide attention maps from the two magnifications are
compared through a batch-by-batch similarity matrix; the loss penalizes the
variance of its diagonal, i.e. cases whose own 10x/20x attention agreement
deviates from the batch average.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class AttentionRecord:
    """Per-subspace flattened attention weights at both magnifications."""

    a10: torch.Tensor  # (B, D)
    a20: torch.Tensor  # (B, D)
    subspace: str  # "T" or "E"

    def __post_init__(self) -> None:
        if self.a10.shape != self.a20.shape or self.a10.ndim != 2:
            raise ValueError(
                f"attention records must share a (B, D) shape, got {tuple(self.a10.shape)} / {tuple(self.a20.shape)}"
            )


def cross_scale_similarity(rec: AttentionRecord, normalize: bool = True) -> torch.Tensor:
    """C[i, j] = <a10_i, a20_j>, with rows L2-normalized first by default.

    Normalization puts the diagonal on a fixed [-1, 1] scale so its variance
    is comparable across batches; the raw dot product is kept behind the flag
    for parity with the unnormalized formulation.
    """
    a10, a20 = rec.a10, rec.a20
    if normalize:
        a10 = a10 / torch.linalg.vector_norm(a10, dim=1, keepdim=True).clamp_min(1e-12)
        a20 = a20 / torch.linalg.vector_norm(a20, dim=1, keepdim=True).clamp_min(1e-12)
    return a10 @ a20.T


def dev_loss(c_matrices: list[torch.Tensor] | tuple[torch.Tensor, ...], lam: float) -> torch.Tensor:
    """Sum over matrices of lam * mean squared deviation of the diagonal.

    Each matrix must be square (one per subspace); only diagonal entries
    contribute.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not c_matrices:
        raise ValueError("need at least one similarity matrix")
    total = None
    for c in c_matrices:
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {tuple(c.shape)}")
        diag = torch.diagonal(c)
        term = lam * ((diag - diag.mean()) ** 2).mean()
        total = term if total is None else total + term
    return total
