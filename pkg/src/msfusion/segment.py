"""Pooled-set construction and a compact 2-D U-Net for slab segmentation.

The pooled training set mixes annotated modality-1 slabs with their
translated modality-2 counterparts as independent samples sharing the same
label maps, so one model segments either modality blindly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_into, save_checkpoint, state_dict_tensors
from .errors import TrainingDivergedError, ValidationError, VolumeIOError
from .msfnet import ce_dice_loss, center_masks_to_tensor, slabs_to_tensor, write_curves
from .volume import LabeledVolume, Slab, Volume, extract_slabs, volume_slabs


@dataclass(frozen=True)
class SegProfile:
    name: str = "default"
    depth: int = 4
    base_width: int = 16
    n_classes: int = 3


SEG_PROFILES = {
    "default": SegProfile(),
    "toy": SegProfile("toy", depth=3, base_width=8),
    "tiny": SegProfile("tiny", depth=2, base_width=2),
}


def _double_conv(w_in, w_out):
    return nn.Sequential(
        nn.Conv2d(w_in, w_out, 3, padding=1),
        nn.InstanceNorm2d(w_out),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv2d(w_out, w_out, 3, padding=1),
        nn.InstanceNorm2d(w_out),
        nn.LeakyReLU(0.01, inplace=True),
    )


class UNet(nn.Module):
    """Plain U-Net: maxpool downs, nearest-upsample ups, skip concats."""

    def __init__(self, profile: SegProfile):
        super().__init__()
        self.profile = profile
        widths = [profile.base_width * 2**i for i in range(profile.depth)]
        self.downs = nn.ModuleList()
        w_in = 3
        for w in widths:
            self.downs.append(_double_conv(w_in, w))
            w_in = w
        self.ups = nn.ModuleList()
        for w_hi, w_lo in zip(widths[-2::-1], widths[:0:-1]):
            self.ups.append(_double_conv(w_lo + w_hi, w_hi))
        self.head = nn.Conv2d(widths[0], profile.n_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.downs):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for block in self.ups:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


def build_seg_model(profile: str | SegProfile, seed: int = 0) -> UNet:
    if isinstance(profile, str):
        try:
            profile = SEG_PROFILES[profile]
        except KeyError:
            raise ValidationError(f"unknown segmentation profile '{profile}'") from None
    torch.manual_seed(seed)
    return UNet(profile)


def build_pooled_set(real1: list[LabeledVolume], fake2: list[Volume], seed: int = 0) -> list[Slab]:
    """Slabs of the real volumes plus slabs of their translations, labels
    copied bit-exactly, shuffled with a seeded RNG."""
    if len(real1) != len(fake2):
        raise ValidationError(f"{len(real1)} labeled volumes vs {len(fake2)} translations")
    slabs: list[Slab] = []
    for lv, fake in zip(real1, fake2):
        if fake.shape != lv.image.shape:
            raise ValidationError(f"translated volume shape {fake.shape} != source {lv.image.shape}")
        slabs.extend(extract_slabs(lv))
        fake_lv = LabeledVolume(fake, lv.vs_mask, lv.gif_mask, lv.koos_grade, f"{lv.subject_id}-gen")
        slabs.extend(extract_slabs(fake_lv))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(slabs))
    return [slabs[i] for i in order]


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    profile: str = "default"
    augment: bool = True
    checkpoint_path: str | None = None
    curves_path: str | None = None


def train_seg(dataset: list[Slab], cfg: SegTrainConfig = SegTrainConfig()) -> tuple[UNet, list]:
    """Minimize CE + soft Dice over the slab dataset."""
    if not dataset:
        raise ValidationError("segmentation dataset is empty")
    if any("vs" not in s.masks for s in dataset):
        raise ValidationError("every training slab needs a vs mask")
    torch.manual_seed(cfg.seed)
    model = build_seg_model(cfg.profile, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n_classes = model.profile.n_classes

    curves = []
    last_checkpoint = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            x = slabs_to_tensor(batch)
            y = center_masks_to_tensor(batch, "vs")
            if cfg.augment:
                if rng.random() < 0.5:
                    x, y = torch.flip(x, [-1]), torch.flip(y, [-1])
                if rng.random() < 0.5:
                    x, y = torch.flip(x, [-2]), torch.flip(y, [-2])
            logits = model(x)
            loss = ce_dice_loss(logits, y, n_classes)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}",
                                            checkpoint=last_checkpoint)
            total += loss.detach().item()
            count += 1
        curves.append((epoch, "ce_dice", total / count))
        if cfg.checkpoint_path:
            save_seg(cfg.checkpoint_path, model, cfg, epoch)
            last_checkpoint = cfg.checkpoint_path

    if cfg.curves_path:
        write_curves(curves, cfg.curves_path)
    return model, curves


def save_seg(path, model: UNet, cfg, epoch: int) -> None:
    manifest = {
        "kind": "seg",
        "profile": asdict(model.profile),
        "epoch": epoch,
        "seed": getattr(cfg, "seed", 0),
    }
    save_checkpoint(path, state_dict_tensors(model), manifest)


def load_seg(path) -> tuple[UNet, dict]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "seg":
        raise VolumeIOError(f"{path} is not a segmentation checkpoint")
    model = UNet(SegProfile(**manifest["profile"]))
    load_state_into(model, tensors)
    return model, manifest


def infer_seg(model: UNet, vol: Volume, batch_size: int = 16) -> Volume:
    """Slab-wise argmax labels reassembled on the input geometry."""
    slabs = volume_slabs(vol, stride=1)
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(slabs), batch_size):
            x = slabs_to_tensor(slabs[start : start + batch_size])
            out.append(model(x).argmax(dim=1).to(torch.uint8).numpy())
    labels = np.concatenate(out, axis=0)
    return Volume(labels.astype(np.float32), vol.spacing, vol.origin, vol.modality)
