"""Confidence-guided coordination of conflicting subspace gradients.

The two subspace losses' gradients are embedded in one flat coordinate space
covering both parameter groups (zero outside their own slice). When the two
vectors conflict (negative cosine), the one backed by the less confident
subspace head is projected onto the orthogonal complement of the other; ties
and non-conflicts leave both untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ParamSlice:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]
    group: str  # "T" or "E"


@dataclass
class GradientBundle:
    """Two flat gradient vectors over a common parameter registry."""

    g_t: torch.Tensor
    g_e: torch.Tensor
    registry: list[ParamSlice]

    def __post_init__(self) -> None:
        if self.g_t.shape != self.g_e.shape or self.g_t.ndim != 1:
            raise ValueError("g_t and g_e must be flat vectors of equal length")
        if self.registry and self.registry[-1].stop != self.g_t.numel():
            raise ValueError("registry does not cover the gradient vectors")


@dataclass(frozen=True)
class ConfidencePair:
    """Batch sums of true-label probability per subspace head."""

    s_t: float
    s_e: float


def confidence_scores(
    logits_t: torch.Tensor, logits_e: torch.Tensor, labels: torch.Tensor
) -> ConfidencePair:
    """Sum of softmax probability assigned to the true label, per subspace."""
    n_classes = logits_t.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    idx = labels.view(-1, 1)
    s_t = torch.softmax(logits_t, dim=1).gather(1, idx).sum()
    s_e = torch.softmax(logits_e, dim=1).gather(1, idx).sum()
    return ConfidencePair(s_t=float(s_t), s_e=float(s_e))


def detect_conflict(bundle: GradientBundle) -> float:
    """Cosine between the two gradient vectors; 0 if either is ~zero."""
    nt = torch.linalg.vector_norm(bundle.g_t)
    ne = torch.linalg.vector_norm(bundle.g_e)
    if nt < 1e-12 or ne < 1e-12:
        return 0.0
    return float(torch.dot(bundle.g_t, bundle.g_e) / (nt * ne))


def project_orthogonal(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Project x1 onto the orthogonal complement of x2."""
    denom = torch.dot(x2, x2)
    if denom <= 0:
        raise ValueError("cannot project onto the complement of a zero vector")
    return x1 - (torch.dot(x1, x2) / denom) * x2


def coordinate(bundle: GradientBundle, conf: ConfidencePair) -> GradientBundle:
    """Resolve a gradient conflict in favor of the more confident subspace.

    No conflict (cosine >= 0) or an exact confidence tie returns the bundle
    unchanged; otherwise exactly the less confident vector is replaced by its
    projection onto the other's orthogonal complement.
    """
    if detect_conflict(bundle) >= 0:
        return bundle
    if conf.s_t < conf.s_e:
        return GradientBundle(
            g_t=project_orthogonal(bundle.g_t, bundle.g_e),
            g_e=bundle.g_e,
            registry=bundle.registry,
        )
    if conf.s_e < conf.s_t:
        return GradientBundle(
            g_t=bundle.g_t,
            g_e=project_orthogonal(bundle.g_e, bundle.g_t),
            registry=bundle.registry,
        )
    return bundle


def build_bundle(
    grads_t: dict[str, torch.Tensor | None],
    grads_e: dict[str, torch.Tensor | None],
    t_names: list[str],
    e_names: list[str],
    param_shapes: dict[str, tuple[int, ...]],
) -> GradientBundle:
    """Embed per-parameter gradients of the two losses into the common space.

    ``grads_t``/``grads_e`` hold each loss's gradients keyed by parameter
    name (missing or None entries count as zero). The registry lists the
    tumor-group slices first, then the TME group.
    """
    registry: list[ParamSlice] = []
    offset = 0
    for group, names in (("T", t_names), ("E", e_names)):
        for name in names:
            shape = tuple(param_shapes[name])
            size = 1
            for s in shape:
                size *= s
            registry.append(ParamSlice(name, offset, offset + size, shape, group))
            offset += size

    def flatten(grads: dict[str, torch.Tensor | None]) -> torch.Tensor:
        ref = next(g for g in list(grads_t.values()) + list(grads_e.values()) if g is not None)
        vec = ref.new_zeros(offset)
        for ps in registry:
            g = grads.get(ps.name)
            if g is not None:
                vec[ps.start : ps.stop] = g.reshape(-1)
        return vec

    return GradientBundle(g_t=flatten(grads_t), g_e=flatten(grads_e), registry=registry)


def unpack_bundle(bundle: GradientBundle) -> dict[str, torch.Tensor]:
    """Per-parameter gradients: sum of both vectors' slices per registry."""
    out: dict[str, torch.Tensor] = {}
    combined = bundle.g_t + bundle.g_e
    for ps in bundle.registry:
        out[ps.name] = combined[ps.start : ps.stop].reshape(ps.shape)
    return out
