"""Measurements over a completed toy-pipeline run directory, shared by the
acceptance suite and the reference-run recorder."""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from msfusion import msfnet
from msfusion.config import PipelineConfig
from msfusion.metrics import load_report, mamse
from msfusion.volume import Modality, load_volume, volume_slabs


def _eval_entries(root: Path, cfg: PipelineConfig):
    manifest = json.loads((root / cfg.dirs.prep / "manifest.json").read_text())
    return manifest["eval"]


def translation_mae(root: Path, cfg: PipelineConfig, model=None) -> float:
    """Mean absolute error of eval-cohort translations against the true
    modality-2 renderings (both in preprocessed space). With a model given,
    translations are recomputed in memory (used for the untrained baseline);
    otherwise the translate stage's outputs are read."""
    prep = root / cfg.dirs.prep
    total = 0.0
    entries = _eval_entries(root, cfg)
    for e in entries:
        true_b = load_volume(prep / e["image_b"]).data
        if model is None:
            fake = load_volume(root / cfg.dirs.translated / f"eval/{e['subject_id']}.nii.gz").data
        else:
            vol_a = load_volume(prep / e["image_a"], Modality.T1)
            fake = msfnet.translate(model, vol_a, "t1_to_t2").data
        total += float(np.mean(np.abs(fake.astype(np.float64) - true_b.astype(np.float64))))
    return total / len(entries)


def untrained_translation_mae(root: Path, cfg: PipelineConfig, seed: int = 12345) -> float:
    model = msfnet.build_model(cfg.msfnet.profile, seed=seed)
    return translation_mae(root, cfg, model=model)


def vs_dice(root: Path, cfg: PipelineConfig, variant: str) -> float:
    report = load_report(root / cfg.dirs.reports / variant / "metrics.json")
    return report.aggregate["vs"]["dice_mean"]


def koos_mamse(root: Path, cfg: PipelineConfig) -> float:
    report = load_report(root / cfg.dirs.reports / "msfnet" / "metrics.json")
    return report.koos["mamse"]


def majority_baseline_mamse(root: Path, cfg: PipelineConfig) -> float:
    truth = [e["grade"] for e in _eval_entries(root, cfg)]
    counts = Counter(truth)
    top = max(counts.values())
    majority = min(g for g, c in counts.items() if c == top)
    return mamse([majority] * len(truth), truth)


def discriminator_fake_accuracy(root: Path, cfg: PipelineConfig) -> float:
    """Fraction of held-out fake patches the trained discriminator still
    scores as fake (< 0.5)."""
    model, _ = msfnet.load_msfnet(root / cfg.dirs.models / "msfnet.ckpt")
    model.eval()
    below = 0
    total = 0
    for e in _eval_entries(root, cfg):
        fake = load_volume(root / cfg.dirs.translated / f"eval/{e['subject_id']}.nii.gz")
        x = msfnet.slabs_to_tensor(volume_slabs(fake))
        with torch.no_grad():
            scores = model.disc_t2(x)
        below += int((scores < 0.5).sum())
        total += scores.numel()
    return below / total


def measure_run(root: Path, cfg: PipelineConfig) -> dict:
    trained = translation_mae(root, cfg)
    untrained = untrained_translation_mae(root, cfg)
    pooled = vs_dice(root, cfg, "msfnet")
    real_only = vs_dice(root, cfg, "real_only")
    return {
        "mae_untrained": untrained,
        "mae_trained": trained,
        "mae_improvement": 1.0 - trained / untrained,
        "vs_dice_pooled": pooled,
        "vs_dice_real_only": real_only,
        "vs_dice_gap": pooled - real_only,
        "koos_mamse": koos_mamse(root, cfg),
        "majority_mamse": majority_baseline_mamse(root, cfg),
        "disc_fake_accuracy": discriminator_fake_accuracy(root, cfg),
    }
