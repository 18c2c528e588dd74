"""Loss functions for the two-student training scheme.

Conventions: frame-level losses sum over frames within a clip and average
over the batch; clip-level losses average over the batch. Probabilities are
clipped to [eps, 1 - eps] before logs. All functions accept float32 or
float64 tensors and preserve dtype, so gradients can be checked in double
precision.
"""

from __future__ import annotations

import torch

EPS = 1e-7
LAMBDA_D = 0.2


def _clip(p: torch.Tensor) -> torch.Tensor:
    return torch.clamp(p, EPS, 1.0 - EPS)


def _bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = _clip(p)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def frame_bce(frame_probs: torch.Tensor, frame_labels: torch.Tensor) -> torch.Tensor:
    """Strong-supervision loss: binary cross-entropy per frame, summed over
    the frames of each clip, averaged over the batch.

    Args:
      frame_probs: (batch, time) or (time,)
      frame_labels: same shape, values in {0, 1}
    """
    if frame_probs.shape != frame_labels.shape:
        raise ValueError(
            f"shape mismatch: {tuple(frame_probs.shape)} vs "
            f"{tuple(frame_labels.shape)}")
    per_clip = _bce(frame_probs, frame_labels.to(frame_probs.dtype)).sum(dim=-1)
    return per_clip.mean()


def clip_bce(clip_probs: torch.Tensor, clip_labels: torch.Tensor) -> torch.Tensor:
    """Weak-supervision loss: binary cross-entropy on the pooled clip
    probability, averaged over the batch.

    Args:
      clip_probs: (batch,) or scalar
      clip_labels: same shape, values in {0, 1}
    """
    return _bce(clip_probs, clip_labels.to(clip_probs.dtype)).mean()


def kd_loss(student_embed: torch.Tensor, teacher_embed: torch.Tensor) -> torch.Tensor:
    """Distillation loss: Frobenius norm of the difference between the two
    students' projected frame feature maps, averaged over the batch.

    The teacher side is detached: distillation moves the student toward the
    teacher, never the reverse.

    Args:
      student_embed: (batch, time, kd_dim) or (time, kd_dim)
      teacher_embed: same shape
    """
    if student_embed.shape != teacher_embed.shape:
        raise ValueError(
            f"shape mismatch: {tuple(student_embed.shape)} vs "
            f"{tuple(teacher_embed.shape)}")
    diff = student_embed - teacher_embed.detach()
    return torch.linalg.norm(diff, dim=(-2, -1)).mean()


def w_kd_loss(clip_probs: torch.Tensor, clip_labels: torch.Tensor,
              student_embed: torch.Tensor, teacher_embed: torch.Tensor,
              kd_weight: float = 1.0) -> torch.Tensor:
    """Weak loss plus distillation term for the weak student."""
    return (clip_bce(clip_probs, clip_labels)
            + kd_weight * kd_loss(student_embed, teacher_embed))


def pseudo_loss(frame_probs: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    """Retraining loss against soft pseudo labels: frame binary cross-entropy
    with targets in [0, 1], summed over frames, averaged over the batch."""
    if frame_probs.shape != soft_targets.shape:
        raise ValueError(
            f"shape mismatch: {tuple(frame_probs.shape)} vs "
            f"{tuple(soft_targets.shape)}")
    if soft_targets.numel() and (soft_targets.min() < 0 or soft_targets.max() > 1):
        raise ValueError("soft targets must lie in [0, 1]")
    per_clip = _bce(frame_probs, soft_targets.detach()).sum(dim=-1)
    return per_clip.mean()


def domain_loss(domain_probs: torch.Tensor, domain_ids: torch.Tensor) -> torch.Tensor:
    """Squared error between predicted domain distribution and the one-hot
    domain label, summed over the two domains, averaged over the batch.

    Args:
      domain_probs: (batch, 2) rows summing to 1
      domain_ids: (batch,) integers, 0 = source, 1 = target
    """
    if domain_probs.shape[-1] != 2:
        raise ValueError("domain probabilities must have two columns")
    one_hot = torch.nn.functional.one_hot(domain_ids.long(), num_classes=2)
    diff = domain_probs - one_hot.to(domain_probs.dtype)
    return (diff * diff).sum(dim=-1).mean()


def adversarial_objective(task_loss: torch.Tensor, dom_loss: torch.Tensor,
                          lambda_d: float = LAMBDA_D) -> torch.Tensor:
    """Feature extractor objective under domain-adversarial training:
    task loss minus lambda_d times the domain loss. The discriminator itself
    minimizes the plain domain loss."""
    return task_loss - lambda_d * dom_loss
