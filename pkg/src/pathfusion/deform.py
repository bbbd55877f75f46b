"""Deformable sampling primitives shared by the teacher and student.

Coordinates live in [-1, 1]^2 with component 0 indexing rows and component 1
columns; -1 maps exactly onto the center of the first patch and +1 onto the
center of the last, so corner points return corner embeddings.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def uniform_reference_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(h, w, 2) uniform grid of reference points spanning [-1, 1]^2."""
    rows = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device) if h > 1 else torch.zeros(1, dtype=dtype, device=device)
    cols = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device) if w > 1 else torch.zeros(1, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([gy, gx], dim=-1)


def bilinear_sample(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample a (B, h, w, c) grid at (B, P, 2) normalized points.

    Points are clamped to [-1, 1] before the 4-corner interpolation, which
    keeps gradients defined at the borders.
    """
    if grid.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2:
        raise ValueError(f"expected grid (B,h,w,c) and points (B,P,2), got {tuple(grid.shape)} / {tuple(points.shape)}")
    if grid.shape[0] != points.shape[0]:
        raise ValueError("batch sizes differ between grid and points")
    b, h, w, c = grid.shape
    pts = points.clamp(-1.0, 1.0)
    r = (pts[..., 0] + 1.0) * 0.5 * (h - 1)
    s = (pts[..., 1] + 1.0) * 0.5 * (w - 1)

    r0f = r.floor().clamp(0, max(h - 2, 0))
    s0f = s.floor().clamp(0, max(w - 2, 0))
    wr = (r - r0f).unsqueeze(-1)
    ws = (s - s0f).unsqueeze(-1)
    r0 = r0f.long()
    s0 = s0f.long()
    r1 = (r0 + 1).clamp(max=h - 1)
    s1 = (s0 + 1).clamp(max=w - 1)

    flat = grid.reshape(b, h * w, c)

    def take(ri, si):
        idx = (ri * w + si).unsqueeze(-1).expand(-1, -1, c)
        return torch.gather(flat, 1, idx)

    top = (1 - ws) * take(r0, s0) + ws * take(r0, s1)
    bottom = (1 - ws) * take(r1, s0) + ws * take(r1, s1)
    return (1 - wr) * top + wr * bottom


class OffsetNetwork(nn.Module):
    """Two convolutions and a bounded scaler producing sampling offsets.

    Input grids larger than the reference grid are average-pooled down to it
    first (the student feeds full slide grids; the teacher's gene token grid
    already matches). tanh bounds each offset component by ``scale``.
    """

    def __init__(self, channels: int, ref_h: int, ref_w: int, scale: float = 0.5):
        super().__init__()
        self.ref_h = ref_h
        self.ref_w = ref_w
        self.scale = scale
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, 2, kernel_size=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.ndim != 4:
            raise ValueError(f"expected (B, h, w, c) grid, got {tuple(grid.shape)}")
        x = grid.permute(0, 3, 1, 2)
        if x.shape[-2:] != (self.ref_h, self.ref_w):
            x = F.adaptive_avg_pool2d(x, (self.ref_h, self.ref_w))
        x = self.conv2(F.gelu(self.conv1(x)))
        return self.scale * torch.tanh(x).permute(0, 2, 3, 1)


class MultiHeadAttention(nn.Module):
    """Plain multi-head softmax attention returning head-averaged weights."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, P, dim) queries over (B, S, dim) keys/values.

        Returns the projected output (B, P, dim) and the head-averaged
        attention matrix (B, P, S).
        """
        if queries.shape[-1] != self.dim or keys_values.shape[-1] != self.dim:
            raise ValueError("token width does not match attention dim")
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys_values))
        v = self._split(self.w_v(keys_values))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(logits, dim=-1)  # (B, H, P, S)
        out = (attn @ v).transpose(1, 2).reshape(queries.shape[0], queries.shape[1], self.dim)
        return self.w_o(out), attn.mean(dim=1)
