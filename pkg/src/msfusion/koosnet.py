"""Koos grade classifier: frozen translation encoder, tumor-mask
concatenation, a high-level conv encoder, and a 4-way linear head.

Subject-level prediction mean-pools high-level features over the subject's
slab set, so duplicating or permuting slabs cannot change the output. The
translation encoder is never trainable here; the high-level encoder is
trainable during contrastive pretraining and frozen during fine-tuning
unless explicitly unfrozen (ablation arm).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_into, save_checkpoint, state_dict_tensors
from .contrastive import ProjectionHead
from .errors import TrainingDivergedError, ValidationError, VolumeIOError
from .msfnet import ArchProfile, Encoder, slabs_to_tensor
from .volume import Slab

N_GRADES = 4


@dataclass(frozen=True)
class KoosProfile:
    name: str = "default"
    width: int = 16
    feat_dim: int = 32
    proj_dim: int = 128
    slab_limit: int = 8


KOOS_PROFILES = {
    "default": KoosProfile(),
    "toy": KoosProfile("toy", width=8, feat_dim=16, proj_dim=16, slab_limit=6),
}


class HighLevelEncoder(nn.Module):
    """Conv stack from (latent + mask) maps to a feature vector."""

    def __init__(self, in_channels: int, width: int, feat_dim: int):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(2 * width, feat_dim)

    def forward(self, x):
        h = self.convs(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.fc(h)


class KoosClassifier(nn.Module):
    def __init__(self, encoder: Encoder, encoder_profile: ArchProfile,
                 profile: KoosProfile = KoosProfile()):
        super().__init__()
        self.profile = profile
        self.encoder_profile = encoder_profile
        self.encoder = encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.enc_h = HighLevelEncoder(encoder_profile.latent_width + 1, profile.width, profile.feat_dim)
        self.fc = nn.Linear(profile.feat_dim, N_GRADES)

    def slab_features(self, x: torch.Tensor, tumor_mask: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) slabs + (B, 1, H, W) binary tumor masks -> (B, feat)."""
        if tumor_mask.shape[-2:] != x.shape[-2:] or tumor_mask.shape[0] != x.shape[0]:
            raise ValidationError(f"mask shape {tuple(tumor_mask.shape)} does not match slabs {tuple(x.shape)}")
        with torch.no_grad():
            latent = self.encoder(x)
        m = F.adaptive_max_pool2d(tumor_mask.to(x.dtype), latent.shape[-2:])
        return self.enc_h(torch.cat([latent, m], dim=1))

    def subject_feature(self, slabs: list[Slab]) -> torch.Tensor:
        """Mean slab feature over the subject's slab set.

        Mean pooling makes the result invariant to slab order and to
        duplicating the whole set. Training-time slab subsetting happens
        when samples are assembled (select_slabs), not here.
        """
        x = slabs_to_tensor(slabs)
        mask = tumor_masks_to_tensor(slabs)
        return self.slab_features(x, mask).mean(dim=0)

    def subject_logits(self, slabs: list[Slab]) -> torch.Tensor:
        return self.fc(self.subject_feature(slabs))


def select_slabs(slabs: list[Slab], limit: int) -> list[Slab]:
    """Keep the `limit` slabs with the largest center-slice tumor area
    (stable order); evenly spaced slabs when no masks are present."""
    if limit <= 0 or len(slabs) <= limit:
        return list(slabs)
    if all("vs" in s.masks for s in slabs):
        areas = np.array([int((s.center_mask("vs") == 1).sum()) for s in slabs])
        keep = np.sort(np.argsort(-areas, kind="stable")[:limit])
    else:
        keep = np.linspace(0, len(slabs) - 1, limit).round().astype(int)
    return [slabs[i] for i in keep]


def tumor_masks_to_tensor(slabs: list[Slab]) -> torch.Tensor:
    """Binary VS-tumor masks of the center slices, (B, 1, H, W)."""
    masks = []
    for s in slabs:
        if "vs" not in s.masks:
            raise ValidationError(f"slab {s.subject_id}/{s.slice_index} has no vs mask")
        masks.append((s.center_mask("vs") == 1).astype(np.float32))
    return torch.from_numpy(np.stack(masks))[:, None]


@dataclass(frozen=True)
class KoosPrediction:
    subject_id: str
    logits: tuple[float, float, float, float]
    grade: int

    @classmethod
    def from_logits(cls, subject_id: str, logits) -> "KoosPrediction":
        vals = tuple(float(v) for v in logits)
        return cls(subject_id, vals, int(np.argmax(vals)) + 1)


@dataclass
class SubjectSample:
    """Paired per-subject training material for pretraining/fine-tuning."""

    subject_id: str
    slabs_a: list[Slab]
    slabs_b: list[Slab]
    grade: int | None = None


# ---------------------------------------------------------------------------
# Fine-tuning and cohort prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    unfreeze: bool = False  # ablation arm: also train the high-level encoder
    checkpoint_path: str | None = None


def finetune(classifier: KoosClassifier, subjects: list[SubjectSample],
             cfg: FinetuneConfig = FinetuneConfig()) -> list:
    """Cross-entropy fine-tuning over annotated subjects.

    Each subject contributes its real modality-1 and generated modality-2
    slab sets as two samples. By default only the final linear layer trains.
    """
    annotated = [s for s in subjects if s.grade is not None]
    if not annotated:
        raise ValidationError("fine-tuning requires grade-annotated subjects")
    torch.manual_seed(cfg.seed)
    params = list(classifier.fc.parameters())
    if cfg.unfreeze:
        params += list(classifier.enc_h.parameters())
    else:
        classifier.enc_h.eval()
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    samples = [(s, "a") for s in annotated] + [(s, "b") for s in annotated]
    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(samples), cfg.batch_size):
            feats, targets = [], []
            for i in order[start : start + cfg.batch_size]:
                subject, side = samples[i]
                slabs = subject.slabs_a if side == "a" else subject.slabs_b
                if cfg.unfreeze:
                    feats.append(classifier.subject_feature(slabs))
                else:
                    with torch.no_grad():
                        feats.append(classifier.subject_feature(slabs))
                targets.append(subject.grade - 1)
            logits = classifier.fc(torch.stack(feats))
            loss = F.cross_entropy(logits, torch.tensor(targets))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            total += loss.detach().item()
            count += 1
        curves.append((epoch, "ce", total / count))
    if cfg.checkpoint_path:
        save_koos(cfg.checkpoint_path, classifier, cfg.seed, extra={"finetuned": True,
                                                                    "unfreeze": cfg.unfreeze})
    return curves


def predict_subject(classifier: KoosClassifier, slabs: list[Slab],
                    subject_id: str) -> KoosPrediction:
    classifier.eval()
    with torch.no_grad():
        logits = classifier.subject_logits(slabs)
    return KoosPrediction.from_logits(subject_id, logits.numpy())


def predict_cohort(classifier: KoosClassifier, cohort: dict[str, list[Slab]],
                   out_csv=None) -> tuple[list[KoosPrediction], dict[str, str]]:
    """One prediction per subject; per-subject failures are recorded and the
    cohort continues. Optionally writes subject_id,grade,logit_1..4 CSV."""
    preds, errors = [], {}
    for sid in sorted(cohort):
        try:
            preds.append(predict_subject(classifier, cohort[sid], sid))
        except (ValidationError, RuntimeError) as e:
            errors[sid] = str(e)
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "grade", "logit_1", "logit_2", "logit_3", "logit_4"])
            for p in preds:
                w.writerow([p.subject_id, p.grade] + [f"{v:.6f}" for v in p.logits])
    return preds, errors


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_koos(path, classifier: KoosClassifier, seed: int,
              heads: tuple[ProjectionHead, ProjectionHead] | None = None,
              extra: dict | None = None) -> None:
    tensors = state_dict_tensors(classifier)
    manifest = {
        "kind": "koosnet",
        "profile": asdict(classifier.profile),
        "encoder_profile": asdict(classifier.encoder_profile),
        "seed": seed,
        "has_heads": heads is not None,
    }
    if heads is not None:
        for name, head in zip(("head_self", "head_sup"), heads):
            for k, v in state_dict_tensors(head).items():
                tensors[f"{name}.{k}"] = v
    if extra:
        manifest.update(extra)
    save_checkpoint(path, tensors, manifest)


def load_koos(path) -> tuple[KoosClassifier, tuple[ProjectionHead, ProjectionHead] | None, dict]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "koosnet":
        raise VolumeIOError(f"{path} is not a koosnet checkpoint")
    enc_profile = ArchProfile(**manifest["encoder_profile"])
    profile = KoosProfile(**manifest["profile"])
    classifier = KoosClassifier(Encoder(enc_profile), enc_profile, profile)
    own = {k: v for k, v in tensors.items() if not k.startswith(("head_self.", "head_sup."))}
    load_state_into(classifier, own)
    heads = None
    if manifest.get("has_heads"):
        heads = (ProjectionHead(profile.feat_dim, profile.proj_dim),
                 ProjectionHead(profile.feat_dim, profile.proj_dim))
        for name, head in zip(("head_self", "head_sup"), heads):
            load_state_into(head, tensors, prefix=f"{name}.")
    return classifier, heads, manifest
