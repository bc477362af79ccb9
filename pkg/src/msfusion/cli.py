"""Command-line entry point orchestrating the full pipeline.

Stages: synth, prep, train-da, translate, train-seg, infer-seg,
pretrain-koos, finetune-koos, predict-koos, evaluate, report.

Exit codes: 0 success, 1 domain error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import ConfigError, MsfusionError


def apply_ablation(cfg: PipelineConfig, ablate: tuple[str, ...]) -> PipelineConfig:
    """Configuration delta for the translation ablation arms."""
    for name in ablate:
        if name not in ("vs", "gif"):
            raise ConfigError(f"unknown ablation '{name}' (expected vs and/or gif)")
    return cfg


def apply_koos_flags(cfg: PipelineConfig, no_freeze: bool, no_pretrain: bool) -> PipelineConfig:
    """Configuration deltas for the classifier ablation arms."""
    koos = cfg.koos
    if no_freeze:
        koos = replace(koos, freeze=False)
    if no_pretrain:
        koos = replace(koos, pretrain=False)
    return replace(cfg, koos=koos)


def _parse_ablate(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(part.strip() for part in text.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msfusion",
        description="Cross-modality MRI translation, pooled segmentation, and grade prediction",
    )
    sub = parser.add_subparsers(dest="stage", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config YAML")
        p.add_argument("--root", default=".", help="directory the configured paths are relative to")
        return p

    add("synth", "generate the synthetic two-modality cohort")
    add("prep", "resample, histogram-match, register, and crop all cases")
    p = add("train-da", "train the translation model")
    p.add_argument("--ablate", default="", metavar="vs,gif",
                   help="disable proxy heads: 'vs,gif' or 'gif'")
    add("translate", "generate modality-2 counterparts of the modality-1 cases")
    p = add("train-seg", "train the segmentation model")
    p.add_argument("--real-only", action="store_true",
                   help="train on real modality-1 slabs only (no pooling)")
    p = add("infer-seg", "predict masks for the held-out cohort")
    p.add_argument("--model", default="seg", help="model checkpoint name (default: seg)")
    p.add_argument("--out", default="masks", help="prediction subdirectory (default: masks)")
    add("pretrain-koos", "contrastive pretraining of the grade classifier")
    p = add("finetune-koos", "fine-tune the grade classifier head")
    p.add_argument("--no-freeze", action="store_true",
                   help="ablation: also train the high-level encoder")
    p.add_argument("--no-pretrain", action="store_true",
                   help="ablation: skip the contrastive-pretrained weights")
    p = add("predict-koos", "predict grades for the held-out cohort")
    p.add_argument("--masks", default="masks", help="predicted-mask subdirectory")
    p = add("evaluate", "compute Dice/ASSD/MAMSE against the held-out truth")
    p.add_argument("--name", default="msfnet", help="variant name for the report row")
    p.add_argument("--masks", default="masks", help="predicted-mask subdirectory")
    p.add_argument("--no-koos", action="store_true", help="skip grading metrics")
    add("report", "aggregate evaluation reports into a summary table")
    return parser


def run(args) -> None:
    cfg = load_config(args.config)
    root = Path(args.root)
    stage = args.stage
    if stage == "synth":
        pipeline.stage_synth(cfg, root)
    elif stage == "prep":
        pipeline.stage_prep(cfg, root)
    elif stage == "train-da":
        ablate = _parse_ablate(args.ablate)
        pipeline.stage_train_da(apply_ablation(cfg, ablate), root, ablate)
    elif stage == "translate":
        pipeline.stage_translate(cfg, root)
    elif stage == "train-seg":
        pipeline.stage_train_seg(cfg, root, pool=not args.real_only)
    elif stage == "infer-seg":
        pipeline.stage_infer_seg(cfg, root, model_name=args.model, out_name=args.out)
    elif stage == "pretrain-koos":
        pipeline.stage_pretrain_koos(cfg, root)
    elif stage == "finetune-koos":
        pipeline.stage_finetune_koos(apply_koos_flags(cfg, args.no_freeze, args.no_pretrain), root)
    elif stage == "predict-koos":
        pipeline.stage_predict_koos(cfg, root, masks_name=args.masks)
    elif stage == "evaluate":
        pipeline.stage_evaluate(cfg, root, name=args.name, masks_name=args.masks,
                                with_koos=not args.no_koos)
    elif stage == "report":
        pipeline.stage_report(cfg, root)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown stage '{stage}'")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MsfusionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
