"""The six-term supervised objective: batch-hard triplets, identity CE,
label-smoothing regularization and the joint-to-specific KL feedback.

All operations take and return torch tensors so gradients flow through a
single combined backward pass. Logs are floored at 1e-12; the KL teacher is
always detached, so no gradient reaches the joint head through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, DataError, NumericError

LOG_FLOOR = 1e-12
ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the supervised objective."""

    margin: float = 0.3
    epsilon: float = 0.1
    omega: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.5

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ConfigError("triplet margin must be positive")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("smoothing epsilon must lie in [0, 1)")
        if min(self.omega, self.lambda3, self.lambda4) < 0:
            raise ConfigError("omega, lambda3 and lambda4 must be non-negative")

    @classmethod
    def for_profile(cls, profile: str) -> "LossConfig":
        """Dataset profile presets: the joint LSR weight differs."""
        if profile == "sysu":
            return cls(omega=1.0)
        if profile == "regdb":
            return cls(omega=0.7)
        raise ConfigError(f"unknown loss profile {profile!r}")


class ClassifierHead(nn.Module):
    """Bias-free linear map from embeddings to identity logits."""

    def __init__(self, dim: int, num_classes: int, generator: torch.Generator | None = None):
        super().__init__()
        if dim < 1 or num_classes < 2:
            raise ConfigError(f"bad classifier shape ({num_classes} x {dim})")
        weight = torch.empty(num_classes, dim)
        nn.init.normal_(weight, std=0.001, generator=generator)
        self.weight = nn.Parameter(weight)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        return vectors @ self.weight.t().to(vectors.dtype)


@dataclass
class ProbBatch:
    """Row-stochastic posterior probabilities for a batch."""

    probs: torch.Tensor

    def __post_init__(self) -> None:
        if self.probs.ndim != 2:
            raise DataError(f"probabilities must be N x C, got shape {tuple(self.probs.shape)}")
        sums = self.probs.detach().sum(dim=1)
        if not torch.all((sums - 1.0).abs() <= ROW_SUM_TOL):
            raise DataError("probability rows must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]


DIST_EPS = 1e-9


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    """All-pairs Euclidean distances.

    A tiny epsilon inside the sqrt bounds the gradient when two embeddings
    coincide (otherwise one collapsed pair puts infinities into the
    backward pass); the value error is below 1e-9 for unit-scale
    distances.
    """
    d2 = (x[:, None, :] - x[None, :, :]).pow(2).sum(dim=2)
    return torch.sqrt(d2.clamp(min=0.0) + DIST_EPS)


def hard_triplet(emb, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances.

    Per anchor: hinge(hardest positive - hardest negative + margin),
    averaged over anchors that have at least one positive. The batch must
    contain at least two identities.
    """
    vectors, labels = emb.vectors, emb.labels
    if vectors.ndim != 2:
        raise DataError(f"embeddings must be N x D, got {tuple(vectors.shape)}")
    n = vectors.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=vectors.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not neg_mask.any():
        raise DataError("triplet loss needs at least two identities in the batch")
    has_pos = pos_mask.any(dim=1)
    if not has_pos.any():
        raise DataError("triplet loss needs at least one identity with two samples")

    dist = pairwise_euclidean(vectors)
    very_neg = torch.finfo(dist.dtype).min
    very_pos = torch.finfo(dist.dtype).max
    d_pos = dist.masked_fill(~pos_mask, very_neg).max(dim=1).values
    d_neg = dist.masked_fill(~neg_mask, very_pos).min(dim=1).values
    hinge = torch.clamp(d_pos - d_neg + margin, min=0.0)
    return hinge[has_pos].mean()


def posterior(head: ClassifierHead, emb) -> ProbBatch:
    """Row-wise softmax of the head logits with max-subtraction."""
    vectors = emb.vectors
    if vectors.shape[1] != head.dim:
        raise DataError(
            f"embedding dimension {vectors.shape[1]} does not match head dimension {head.dim}"
        )
    logits = head(vectors)
    logits = logits - logits.max(dim=1, keepdim=True).values
    return ProbBatch(torch.softmax(logits, dim=1))


def _check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return labels


def identity_ce(probs: ProbBatch, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class."""
    labels = _check_labels(labels, probs.num_classes)
    picked = probs.probs.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp(min=LOG_FLOOR)).mean()


def lsr_targets(labels: torch.Tensor, num_classes: int, epsilon: float) -> ProbBatch:
    """Smoothed target rows: 1 - eps + eps/C on the true class, eps/C elsewhere."""
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError("smoothing epsilon must lie in [0, 1)")
    labels = _check_labels(labels, num_classes)
    q = torch.full((len(labels), num_classes), epsilon / num_classes, dtype=torch.float64)
    q[torch.arange(len(labels)), labels] = 1.0 - epsilon + epsilon / num_classes
    return ProbBatch(q)


def lsr_loss(probs: ProbBatch, targets: ProbBatch) -> torch.Tensor:
    """Soft-target cross-entropy between smoothed targets and predictions."""
    if probs.probs.shape != targets.probs.shape:
        raise DataError(
            f"shape mismatch: probs {tuple(probs.probs.shape)} vs "
            f"targets {tuple(targets.probs.shape)}"
        )
    q = targets.probs.detach().to(probs.probs.dtype)
    logp = torch.log(probs.probs.clamp(min=LOG_FLOOR))
    return -(q * logp).sum(dim=1).mean()


def joint_hybrid_loss(joint_probs: ProbBatch, labels: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Identity CE plus omega-weighted LSR on the joint posterior."""
    ce = identity_ce(joint_probs, labels)
    if cfg.omega == 0.0:
        return ce
    targets = lsr_targets(labels, joint_probs.num_classes, cfg.epsilon)
    return ce + cfg.omega * lsr_loss(joint_probs, targets)


def kl_feedback(teacher: ProbBatch, student: ProbBatch) -> torch.Tensor:
    """KL(teacher || student), mean over the batch, teacher detached."""
    if teacher.probs.shape != student.probs.shape:
        raise DataError(
            f"shape mismatch: teacher {tuple(teacher.probs.shape)} vs "
            f"student {tuple(student.probs.shape)}"
        )
    p = teacher.probs.detach().clamp(min=LOG_FLOOR)
    q = student.probs.clamp(min=LOG_FLOOR)
    return (p * (torch.log(p) - torch.log(q))).sum(dim=1).mean()


def regularized_branch_losses(
    p_g: ProbBatch,
    p_h: ProbBatch,
    p_joint: ProbBatch,
    labels: torch.Tensor,
    cfg: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-branch identity CE with joint-to-specific KL feedback added.

    The joint posterior acts as the soft target and never receives a
    gradient from these terms.
    """
    loss_g = identity_ce(p_g, labels) + cfg.lambda3 * kl_feedback(p_joint, p_g)
    loss_h = identity_ce(p_h, labels) + cfg.lambda4 * kl_feedback(p_joint, p_h)
    return loss_g, loss_h


@dataclass
class LossBundle:
    """Named scalar terms of the total objective plus diagnostics.

    `id_*` terms are the regularized identity losses as they enter the
    total; `kl_*` report the raw feedback divergences separately.
    """

    id_g: torch.Tensor
    id_h: torch.Tensor
    id_joint: torch.Tensor
    t_g: torch.Tensor
    t_h: torch.Tensor
    t_joint: torch.Tensor
    kl_g: torch.Tensor | float = 0.0
    kl_h: torch.Tensor | float = 0.0
    total: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        terms = {
            "id_g": self.id_g,
            "id_h": self.id_h,
            "id_joint": self.id_joint,
            "t_g": self.t_g,
            "t_h": self.t_h,
            "t_joint": self.t_joint,
        }
        for name, value in terms.items():
            v = float(value.detach() if torch.is_tensor(value) else value)
            if not math.isfinite(v):
                raise NumericError(f"loss term {name} is not finite: {v}")
        self.total = self.id_g + self.id_h + self.id_joint + self.t_g + self.t_h + self.t_joint

    def to_record(self, step: int, epoch: int) -> dict:
        """One JSON-lines training-log record."""

        def val(v):
            return float(v.detach() if torch.is_tensor(v) else v)

        return {
            "step": step,
            "epoch": epoch,
            "l_id_g": val(self.id_g),
            "l_id_h": val(self.id_h),
            "l_id_joint": val(self.id_joint),
            "l_t_g": val(self.t_g),
            "l_t_h": val(self.t_h),
            "l_t_joint": val(self.t_joint),
            "kl_g": val(self.kl_g),
            "kl_h": val(self.kl_h),
            "total": val(self.total),
        }


def total_loss(
    id_g,
    id_h,
    id_joint,
    t_g,
    t_h,
    t_joint,
    kl_g=0.0,
    kl_h=0.0,
) -> LossBundle:
    """Bundle the six objective terms; their unweighted sum is the total."""

    def as_t(v):
        return v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)

    return LossBundle(
        id_g=as_t(id_g),
        id_h=as_t(id_h),
        id_joint=as_t(id_joint),
        t_g=as_t(t_g),
        t_h=as_t(t_h),
        t_joint=as_t(t_joint),
        kl_g=kl_g,
        kl_h=kl_h,
    )
