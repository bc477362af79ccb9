"""Cross-modal contrastive objectives for classifier pretraining.

Both losses operate on an EmbeddingBatch of row-aligned projections
(row i of each modality comes from the same subject). The self-supervised
loss treats only the same-index cross-modal sample as positive; the
supervised loss widens the positive set to every sample sharing the
anchor's grade (including the anchor index itself).

Each summand is the log of the product of the two directional softmax
fractions, so both losses are non-negative and vanish only in the limit of
perfectly peaked cross-modal similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import TrainingDivergedError, ValidationError


@dataclass
class EmbeddingBatch:
    """Paired per-modality projection vectors.

    z1, z2: (N, d); rows are unit-normalized at construction.
    grades: optional (N,) integer labels for the supervised loss.
    tau: softmax temperature, > 0.
    """

    z1: torch.Tensor
    z2: torch.Tensor
    grades: torch.Tensor | None = None
    tau: float = 0.1

    def __post_init__(self):
        z1 = torch.as_tensor(self.z1)
        z2 = torch.as_tensor(self.z2)
        if z1.ndim != 2 or z1.shape != z2.shape:
            raise ValidationError(f"z1/z2 must be matching (N, d) matrices, got {tuple(z1.shape)} and {tuple(z2.shape)}")
        if self.tau <= 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        self.z1 = F.normalize(z1, dim=1)
        self.z2 = F.normalize(z2, dim=1)
        if self.grades is not None:
            grades = torch.as_tensor(self.grades).long()
            if grades.shape != (z1.shape[0],):
                raise ValidationError("grades must be a vector of length N")
            self.grades = grades


def loss_self(batch: EmbeddingBatch) -> torch.Tensor:
    """Self-supervised cross-modal loss: same-index pairs are positive."""
    sim = batch.z1 @ batch.z2.T / batch.tau
    diag = sim.diagonal()
    row = diag - torch.logsumexp(sim, dim=1)
    col = diag - torch.logsumexp(sim, dim=0)
    return -(row + col).sum()


def loss_sup(batch: EmbeddingBatch) -> torch.Tensor:
    """Supervised cross-modal loss: positives share the anchor's grade.

    The positive set P(i) = {p : y_p = y_i} includes i itself, so with all
    grades distinct this reduces exactly to the self-supervised loss.
    """
    if batch.grades is None:
        raise ValidationError("supervised contrastive loss requires grades")
    sim = batch.z1 @ batch.z2.T / batch.tau
    log_row = sim - torch.logsumexp(sim, dim=1, keepdim=True)  # [i, p]
    log_col = sim - torch.logsumexp(sim, dim=0, keepdim=True)  # [p, i]
    pos = (batch.grades[:, None] == batch.grades[None, :]).to(sim.dtype)
    terms = log_row + log_col.T  # terms[i, p] = log_row[i, p] + log_col[p, i]
    per_anchor = (pos * terms).sum(dim=1) / pos.sum(dim=1)
    return -per_anchor.sum()


class ProjectionHead(nn.Module):
    """Two-layer perceptron mapping high-level features to the contrastive
    embedding space."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim),
            nn.ReLU(inplace=True),
            nn.Linear(in_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 4
    seed: int = 0
    tau: float = 0.1
    weight_self: float = 1.0
    weight_sup: float = 1.0


def pretrain(classifier, head_self: ProjectionHead, head_sup: ProjectionHead,
             subjects, cfg: PretrainConfig = PretrainConfig()) -> list:
    """Contrastive pretraining of the high-level encoder and both heads.

    `subjects` provide paired slab sets (real modality-1, generated
    modality-2); the supervised term runs on the grade-annotated subset of
    each batch. The classifier's translation encoder stays frozen; its final
    linear layer is untouched.
    """
    if not subjects:
        raise ValidationError("pretraining requires at least one subject")
    torch.manual_seed(cfg.seed)
    params = (list(classifier.enc_h.parameters())
              + list(head_self.parameters()) + list(head_sup.parameters()))
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(subjects))
        sums = {"self": 0.0, "sup": 0.0, "total": 0.0}
        count = 0
        for start in range(0, len(subjects), cfg.batch_size):
            batch = [subjects[i] for i in order[start : start + cfg.batch_size]]
            feats_a = torch.stack([classifier.subject_feature(s.slabs_a) for s in batch])
            feats_b = torch.stack([classifier.subject_feature(s.slabs_b) for s in batch])
            emb = EmbeddingBatch(head_self(feats_a), head_self(feats_b), tau=cfg.tau)
            l_self = loss_self(emb)
            loss = cfg.weight_self * l_self
            labeled = [k for k, s in enumerate(batch) if s.grade is not None]
            l_sup = None
            if labeled and cfg.weight_sup > 0:
                idx = torch.tensor(labeled)
                grades = torch.tensor([batch[k].grade for k in labeled])
                emb_sup = EmbeddingBatch(head_sup(feats_a[idx]), head_sup(feats_b[idx]),
                                         grades=grades, tau=cfg.tau)
                l_sup = loss_sup(emb_sup)
                loss = loss + cfg.weight_sup * l_sup
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite pretraining loss at epoch {epoch}")
            sums["self"] += l_self.detach().item()
            sums["sup"] += 0.0 if l_sup is None else l_sup.detach().item()
            sums["total"] += loss.detach().item()
            count += 1
        for name, value in sorted(sums.items()):
            curves.append((epoch, name, value / count))
    return curves
