"""Teacher-to-student distillation losses.

Prediction-level: KL divergence between temperature-softened teacher and
student outputs (both softened with the same temperature; optionally scaled
by tau^2 so the gradient magnitude stays temperature-invariant).
Representation-level: MSE between the teacher's concatenated subspace
features and the student representation. Teacher values are constants.
"""

from __future__ import annotations

import torch


def soften(logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled softmax with max-subtraction for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau!r}")
    z = logits / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def kl_loss(p_teacher: torch.Tensor, p_student: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL(teacher || student) over probability rows.

    Zero-probability teacher entries contribute nothing; a nonpositive
    student probability where the teacher is positive is an error.
    """
    if p_teacher.shape != p_student.shape:
        raise ValueError("distribution shapes differ")
    support = p_teacher > 0
    if bool((support & (p_student <= 0)).any()):
        raise ValueError("student assigns zero probability inside teacher support")
    log_ratio = torch.where(support, torch.log(p_teacher.clamp_min(1e-30)) - torch.log(p_student.clamp_min(1e-30)), torch.zeros_like(p_teacher))
    per_case = (p_teacher * log_ratio).sum(dim=-1)
    return per_case.mean()


def prediction_kl(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    tau: float,
    tau_sq_scale: bool = True,
) -> torch.Tensor:
    """KL between softened teacher and softened student predictions."""
    loss = kl_loss(soften(teacher_logits.detach(), tau), soften(student_logits, tau))
    if tau_sq_scale:
        loss = loss * (tau * tau)
    return loss


def representation_mse(teacher_rep: torch.Tensor, student_rep: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared distance between representations.

    The teacher side is detached: no gradient ever reaches the teacher.
    """
    if teacher_rep.shape != student_rep.shape:
        raise ValueError(
            f"representation widths differ: {tuple(teacher_rep.shape)} vs {tuple(student_rep.shape)}"
        )
    diff = teacher_rep.detach() - student_rep
    return (diff * diff).sum(dim=-1).mean()


def distill_loss(
    task: torch.Tensor,
    mse: torch.Tensor,
    kl: torch.Tensor,
    w_task: float = 1.0,
    w_mse: float = 1.0,
    w_kl: float = 1.0,
) -> torch.Tensor:
    """Weighted sum of the three distillation objective terms."""
    for name, value in (("task", task), ("mse", mse), ("kl", kl)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise ValueError(f"non-finite {name} component in distillation loss")
    return w_task * task + w_mse * mse + w_kl * kl
