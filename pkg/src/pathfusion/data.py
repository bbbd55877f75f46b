"""In-memory cohort structures shared by the generator, loader, and pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SlideGrid:
    """An h x w x c grid of patch embeddings at one magnification.

    ``coords`` maps each grid slot back to the (row, col) of the source patch
    it was taken from, so resampled grids keep track of patch identity.
    ``valid`` flags padding slots introduced by resampling (True = real patch).
    """

    data: np.ndarray  # (h, w, c) float32
    coords: np.ndarray  # (h, w, 2) int32, source (row, col) per slot
    valid: np.ndarray  # (h, w) bool

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_patches(self) -> int:
        return self.data.shape[0] * self.data.shape[1]

    def tokens(self) -> np.ndarray:
        """Flatten to (h*w, c)."""
        h, w, c = self.data.shape
        return self.data.reshape(h * w, c)


def dense_grid(data: np.ndarray) -> SlideGrid:
    """Wrap a raw (h, w, c) array as a grid with identity coordinates."""
    h, w, _ = data.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows, cols], axis=-1).astype(np.int32)
    return SlideGrid(
        data=np.ascontiguousarray(data, dtype=np.float32),
        coords=coords,
        valid=np.ones((h, w), dtype=bool),
    )


@dataclass
class Case:
    """One cohort member: two-scale slide grids, gene subsets, and labels."""

    case_id: str
    genes_tumor: np.ndarray  # (n_tumor_genes,) float32
    genes_tme: np.ndarray  # (n_tme_genes,) float32
    grid10: SlideGrid
    grid20: SlideGrid
    diagnosis: int  # {0..3}
    grade: int  # {0..2}
    surv_bin: int  # {0..3}
    surv_time: float  # observed (event or censoring) time, > 0
    censored: bool
    tumor_mask10: np.ndarray | None = None  # (h10, w10) bool


@dataclass
class Cohort:
    """A set of cases plus the gene universe they share.

    ``tumor_idx``/``tme_idx`` index into ``gene_ids`` and record how the full
    expression vector splits into the two subsets; ``full_expression`` puts a
    case's subset vectors back into gene_ids order.
    """

    cases: list[Case]
    gene_ids: list[str]
    tumor_idx: np.ndarray  # int indices into gene_ids
    tme_idx: np.ndarray
    dims: dict = field(default_factory=dict)  # h10, w10, h20, w20, c, n_genes

    def __len__(self) -> int:
        return len(self.cases)

    def full_expression(self, case: Case) -> np.ndarray:
        full = np.zeros(len(self.gene_ids), dtype=np.float32)
        full[self.tumor_idx] = case.genes_tumor
        full[self.tme_idx] = case.genes_tme
        return full

    def expression_matrix(self) -> np.ndarray:
        """(n_cases, n_genes) matrix in gene_ids order."""
        return np.stack([self.full_expression(c) for c in self.cases])

    def geneset(self) -> dict[str, str]:
        labels = {}
        for i in self.tumor_idx:
            labels[self.gene_ids[i]] = "TUMOR"
        for i in self.tme_idx:
            labels[self.gene_ids[i]] = "TME"
        return labels
