"""Contrastive objectives over task-embedding matrices.

Rows of an embedding matrix come in positive pairs ``(0, 1), (2, 3), ...``.
Similarity is cosine throughout. All functions are differentiable torch
expressions and work in float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .encoding import check_nondegenerate


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    lambda_con: float = 1.0
    cluster_count: int = 3
    entropy_weight: float = 1.0
    cluster_temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0 or self.cluster_temperature <= 0:
            raise LossError("temperatures must be positive")
        if self.lambda_con < 0:
            raise LossError("lambda_con must be non-negative")
        if self.cluster_count < 2:
            raise LossError("cluster_count must be at least 2")


class ClusteringLoss(NamedTuple):
    total: torch.Tensor
    task: torch.Tensor
    cluster: torch.Tensor
    entropy: torch.Tensor


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise LossError(f"temperature must be positive, got {temperature}")


def cosine_logits(Z: torch.Tensor, temperature: float) -> torch.Tensor:
    """``sim(z_i, z_k) / temperature`` with the diagonal masked to ``-inf``."""
    _check_temperature(temperature)
    check_nondegenerate(Z)
    Zn = F.normalize(Z, dim=1, eps=0.0)
    logits = Zn @ Zn.T / temperature
    eye = torch.eye(Z.shape[0], dtype=torch.bool, device=Z.device)
    return logits.masked_fill(eye, float("-inf"))


def nt_xent(i: int, j: int, Z: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent loss of anchor ``i`` against positive ``j``."""
    if i == j:
        raise LossError("anchor and positive must differ")
    logits = cosine_logits(Z, temperature)
    return torch.logsumexp(logits[i], dim=0) - logits[i, j]


def _pair_partner(n: int, device=None) -> torch.Tensor:
    idx = torch.arange(n, device=device)
    return idx + 1 - 2 * (idx % 2)


def task_contrastive_loss(Z: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean NT-Xent over both directions of every positive pair."""
    n = Z.shape[0]
    if n % 2 or n == 0:
        raise LossError(f"need an even, non-zero number of rows, got {n}")
    logits = cosine_logits(Z, temperature)
    partner = _pair_partner(n, Z.device)
    pos = logits[torch.arange(n, device=Z.device), partner]
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def assignment_entropy(P: torch.Tensor) -> torch.Tensor:
    """Entropy of the batch-mean cluster distribution."""
    p = P.mean(dim=0)
    return -(p * torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))).sum()


def cluster_contrastive_loss(P: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent over assignment columns, pairing column c of both views."""
    n, C = P.shape
    if n % 2:
        raise LossError("assignment matrix must have an even number of rows")
    view_a, view_b = P[0::2], P[1::2]
    cols = torch.stack([view_a.T, view_b.T], dim=1).reshape(2 * C, n // 2)
    return task_contrastive_loss(cols, temperature)


def contrastive_clustering_loss(
    Z: torch.Tensor,
    cluster_head: Callable[[torch.Tensor], torch.Tensor] | torch.Tensor,
    config: LossConfig,
) -> ClusteringLoss:
    """Task contrastive clustering: ``L_task + L_clu - entropy_weight * H``.

    ``cluster_head`` maps rows of ``Z`` to assignment probabilities, or is the
    ``(2N, C)`` probability matrix itself.
    """
    P = cluster_head(Z) if callable(cluster_head) else cluster_head
    if P.ndim != 2 or P.shape[0] != Z.shape[0]:
        raise LossError(f"assignment matrix shape {tuple(P.shape)} does not match {Z.shape[0]} rows")
    if P.shape[1] < 2:
        raise LossError("need at least 2 clusters")
    if torch.any(P < 0) or torch.any(torch.abs(P.detach().sum(dim=1) - 1) > 1e-6):
        raise LossError("assignment rows must be probability vectors")
    l_task = task_contrastive_loss(Z, config.temperature)
    l_clu = cluster_contrastive_loss(P, config.cluster_temperature)
    h = assignment_entropy(P)
    return ClusteringLoss(l_task + l_clu - config.entropy_weight * h, l_task, l_clu, h)


def supervised_task_contrastive_loss(Z: torch.Tensor, domain_labels: Sequence, temperature: float) -> torch.Tensor:
    """Supervised contrastive loss with all same-label rows as positives.

    Anchors without any positive are skipped; the result averages the
    remaining anchors.
    """
    labels = list(domain_labels)
    n = Z.shape[0]
    if len(labels) != n:
        raise LossError("one domain label per row required")
    codes = {lab: k for k, lab in enumerate(dict.fromkeys(labels))}
    y = torch.tensor([codes[lab] for lab in labels], device=Z.device)
    logits = cosine_logits(Z, temperature)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    eye = torch.eye(n, dtype=torch.bool, device=Z.device)
    pos = (y[:, None] == y[None, :]) & ~eye
    counts = pos.sum(dim=1)
    anchors = counts > 0
    if not torch.any(anchors):
        raise LossError("no row shares its label with another row")
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(dim=1)[anchors] / counts[anchors])
    return per_anchor.mean()
