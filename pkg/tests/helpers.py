"""Shared test oracles and fixtures: brute-force triplet loss, the tiny
two-branch model for gradient checks, and the finite-difference harness."""

from __future__ import annotations

import math

import numpy as np
import torch

from agm.backbone import EmbeddingBatch, fuse_concat
from agm.harness import AgmNet, TrainConfig
from agm.losses import (
    LossConfig,
    ProbBatch,
    hard_triplet,
    identity_ce,
    joint_hybrid_loss,
    kl_feedback,
    posterior,
    total_loss,
)


def brute_force_triplet(vectors: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """Independent oracle: explicit loops over all same/different pairs."""
    n = len(vectors)

    def dist(a, b):
        return math.sqrt(sum((vectors[a][t] - vectors[b][t]) ** 2 for t in range(len(vectors[a]))))

    per_anchor = []
    for a in range(n):
        pos = [dist(a, j) for j in range(n) if j != a and labels[j] == labels[a]]
        neg = [dist(a, j) for j in range(n) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        per_anchor.append(max(max(pos) - min(neg) + margin, 0.0))
    return sum(per_anchor) / len(per_anchor)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        total_epochs=4,
        warmup_epochs=1,
        peak_until=2,
        mid_until=3,
        batch_size=8,
        pk_p=4,
        pk_k=2,
        global_hw=(16, 8),
        hs_hw=(8, 8),
        stage_channels=(6, 8),
        norm="none",
        activation="softplus",
        gem_eps=1e-30,
        crop_padding=1,
        erase_probability=0.25,
        seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_model(num_classes: int = 5, **overrides) -> tuple[AgmNet, TrainConfig]:
    cfg = tiny_train_config(**overrides)
    model = AgmNet(cfg, num_classes=num_classes)
    for module in model.modules().values():
        module.double()
    return model, cfg


def tiny_batch(seed: int = 5, n: int = 8):
    """Fixed float64 inputs and labels for the tiny model."""
    g = torch.Generator().manual_seed(seed)
    x_g = torch.rand((n, 3, 16, 8), generator=g, dtype=torch.float64) * 2 - 1
    x_h = torch.rand((n, 3, 8, 8), generator=g, dtype=torch.float64) * 2 - 1
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3][:n])
    return x_g, x_h, labels


def frozen_teacher_objective(model: AgmNet, x_g, x_h, labels, lc: LossConfig, teacher: torch.Tensor):
    """The training objective with the KL teacher held at a constant.

    The true gradient of the real objective (teacher detached) equals the
    gradient of this function evaluated with teacher = joint posterior at
    the expansion point, which makes it finite-difference comparable.
    """
    emb_g = EmbeddingBatch(model.gem_g(model.net_g(x_g)), labels, branch="global")
    emb_h = EmbeddingBatch(model.gem_h(model.net_h(x_h)), labels, branch="head_shoulder")
    emb_j = fuse_concat(emb_g, emb_h)
    p_g = posterior(model.head_g, emb_g)
    p_h = posterior(model.head_h, emb_h)
    p_j = posterior(model.head_joint, emb_j)
    teacher_batch = ProbBatch(teacher)
    id_g = identity_ce(p_g, labels) + lc.lambda3 * kl_feedback(teacher_batch, p_g)
    id_h = identity_ce(p_h, labels) + lc.lambda4 * kl_feedback(teacher_batch, p_h)
    id_j = joint_hybrid_loss(p_j, labels, lc)
    bundle = total_loss(
        id_g,
        id_h,
        id_j,
        hard_triplet(emb_g, lc.margin),
        hard_triplet(emb_h, lc.margin),
        hard_triplet(emb_j, lc.margin),
    )
    return bundle.total


def joint_teacher(model: AgmNet, x_g, x_h, labels) -> torch.Tensor:
    with torch.no_grad():
        emb_g = EmbeddingBatch(model.gem_g(model.net_g(x_g)), labels, branch="global")
        emb_h = EmbeddingBatch(model.gem_h(model.net_h(x_h)), labels, branch="head_shoulder")
        emb_j = fuse_concat(emb_g, emb_h)
        return posterior(model.head_joint, emb_j).probs.clone()


def switching_point_margin(model: AgmNet, x_g, x_h, labels) -> float:
    """Smallest distance to a hinge zero or a hard-pair argmax tie across
    the three triplet losses; the gradcheck fixture must keep this large."""
    margins = []
    with torch.no_grad():
        emb_g = EmbeddingBatch(model.gem_g(model.net_g(x_g)), labels, branch="global")
        emb_h = EmbeddingBatch(model.gem_h(model.net_h(x_h)), labels, branch="head_shoulder")
        emb_j = fuse_concat(emb_g, emb_h)
        for emb in (emb_g, emb_h, emb_j):
            v = emb.vectors
            d = torch.cdist(v, v, p=2)
            n = len(v)
            same = labels[:, None] == labels[None, :]
            eye = torch.eye(n, dtype=torch.bool)
            for a in range(n):
                pos = d[a][same[a] & ~eye[a]]
                neg = d[a][~same[a]]
                if len(pos) == 0 or len(neg) == 0:
                    continue
                margins.append(abs(float(pos.max() - neg.min() + 0.3)))
                if len(pos) > 1:
                    top2 = torch.topk(pos, 2).values
                    margins.append(float(top2[0] - top2[1]))
                if len(neg) > 1:
                    bot2 = torch.topk(neg, 2, largest=False).values
                    margins.append(float(bot2[1] - bot2[0]))
    return min(margins)


def finite_difference_gradients(objective, params: list[torch.nn.Parameter], h: float = 1e-5):
    """Central differences of a scalar objective for every parameter entry."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = float(objective())
                flat[i] = orig - h
                lo = float(objective())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * h)
            grads.append(g)
    return grads
