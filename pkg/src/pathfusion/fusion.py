"""Multi-modal teacher: gene-guided deformable fusion per subspace.

Each subspace branch tokenizes its gene subvector into a query grid, derives
sampling offsets from those tokens, samples the slide grid at the deformed
reference points, runs gene-to-slide cross attention, and then a selection
attention back onto the gene tokens. Branch parameters are shared across the
two magnifications; offsets depend only on the gene tokens, so both scales
are probed at the same normalized locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .deform import MultiHeadAttention, OffsetNetwork, bilinear_sample, uniform_reference_grid


class GeneTokenizer(nn.Module):
    """Affine map from a raw gene subvector to an h_G x w_G token grid."""

    def __init__(self, n_genes: int, grid_h: int, grid_w: int, dim: int):
        super().__init__()
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.dim = dim
        self.proj = nn.Linear(n_genes, grid_h * grid_w * dim)

    def forward(self, genes: torch.Tensor) -> torch.Tensor:
        if genes.ndim != 2 or genes.shape[1] != self.proj.in_features:
            raise ValueError(f"expected (B, {self.proj.in_features}) genes, got {tuple(genes.shape)}")
        return self.proj(genes).view(genes.shape[0], self.grid_h * self.grid_w, self.dim)


class FusionBranch(nn.Module):
    """One subspace: deformation layer plus selection layer."""

    def __init__(self, n_genes: int, dim: int, n_heads: int, query_grid: int, offset_scale: float):
        super().__init__()
        self.query_grid = query_grid
        self.tokenizer = GeneTokenizer(n_genes, query_grid, query_grid, dim)
        self.offset_net = OffsetNetwork(dim, query_grid, query_grid, scale=offset_scale)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.select_attn = MultiHeadAttention(dim, n_heads)

    def forward(self, genes: torch.Tensor, slide_grids: dict[str, torch.Tensor]):
        """Run the branch over every magnification.

        ``slide_grids`` maps magnification tags to (B, h, w, dim) feature
        grids. Returns the magnification-averaged pooled representation
        (B, dim), plus per-magnification head-averaged gene-to-slide
        attention maps (B, P, P) for the consistency loss.
        """
        b = genes.shape[0]
        tokens = self.tokenizer(genes)  # (B, P, dim)
        token_grid = tokens.view(b, self.query_grid, self.query_grid, -1)
        offsets = self.offset_net(token_grid)  # (B, hG, wG, 2)
        ref = uniform_reference_grid(self.query_grid, self.query_grid, dtype=tokens.dtype, device=tokens.device)
        points = (ref.unsqueeze(0) + offsets).view(b, -1, 2)

        reps = []
        attn_maps: dict[str, torch.Tensor] = {}
        for mag, grid in slide_grids.items():
            sampled = bilinear_sample(grid, points)  # (B, P, dim)
            fused, attn = self.cross_attn(tokens, sampled)
            selected, _ = self.select_attn(fused, tokens)
            reps.append(selected.mean(dim=1))
            attn_maps[mag] = attn
        rep = torch.stack(reps).mean(dim=0)
        return rep, attn_maps


@dataclass
class TeacherOutput:
    rep_tumor: torch.Tensor  # (B, dim)
    rep_tme: torch.Tensor  # (B, dim)
    rep_cat: torch.Tensor  # (B, 2*dim), the distillation target
    logits: torch.Tensor  # (B, n_out) from the combined representation
    aux_logits_tumor: torch.Tensor  # (B, n_out) subspace confidence head
    aux_logits_tme: torch.Tensor
    attn: dict[tuple[str, str], torch.Tensor]  # (subspace, magnification) -> (B, P, P)


class MultiModalTeacher(nn.Module):
    """Two-branch fusion model over gene subsets and two-scale slide grids."""

    def __init__(
        self,
        n_tumor_genes: int,
        n_tme_genes: int,
        slide_channels: int,
        n_out: int,
        dim: int = 128,
        n_heads: int = 4,
        query_grid: int = 4,
        offset_scale: float = 0.5,
    ):
        super().__init__()
        self.dim = dim
        self.slide_adapter = nn.Linear(slide_channels, dim)
        self.branch_tumor = FusionBranch(n_tumor_genes, dim, n_heads, query_grid, offset_scale)
        self.branch_tme = FusionBranch(n_tme_genes, dim, n_heads, query_grid, offset_scale)
        self.head = nn.Linear(2 * dim, n_out)
        self.aux_head_tumor = nn.Linear(dim, n_out)
        self.aux_head_tme = nn.Linear(dim, n_out)

    def forward(
        self,
        genes_tumor: torch.Tensor,
        genes_tme: torch.Tensor,
        grid10: torch.Tensor,
        grid20: torch.Tensor,
    ) -> TeacherOutput:
        slides = {"10": self.slide_adapter(grid10), "20": self.slide_adapter(grid20)}
        rep_t, attn_t = self.branch_tumor(genes_tumor, slides)
        rep_e, attn_e = self.branch_tme(genes_tme, slides)
        rep_cat = torch.cat([rep_t, rep_e], dim=1)
        attn = {("T", mag): a for mag, a in attn_t.items()}
        attn.update({("E", mag): a for mag, a in attn_e.items()})
        return TeacherOutput(
            rep_tumor=rep_t,
            rep_tme=rep_e,
            rep_cat=rep_cat,
            logits=self.head(rep_cat),
            aux_logits_tumor=self.aux_head_tumor(rep_t),
            aux_logits_tme=self.aux_head_tme(rep_e),
            attn=attn,
        )


def subspace_parameter_names(model: MultiModalTeacher) -> tuple[list[str], list[str], list[str]]:
    """Partition teacher parameter names into (tumor, tme, shared) groups.

    Groups drive the gradient-coordination bundle: each subspace owns its
    branch and auxiliary head; everything else (slide adapter, combined head)
    is shared and stays outside the projection space.
    """
    tumor, tme, shared = [], [], []
    for name, _ in model.named_parameters():
        if name.startswith(("branch_tumor.", "aux_head_tumor.")):
            tumor.append(name)
        elif name.startswith(("branch_tme.", "aux_head_tme.")):
            tme.append(name)
        else:
            shared.append(name)
    return sorted(tumor), sorted(tme), sorted(shared)
