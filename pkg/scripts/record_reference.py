#!/usr/bin/env python3
"""Run the toy pipeline end to end and record the reference measurements
the acceptance thresholds were pinned against.

Usage: python scripts/record_reference.py [--root DIR] [--keep]
"""

import argparse
import json
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "tests"))

from msfusion import cli  # noqa: E402
from msfusion.config import config_hash, load_config  # noqa: E402

import e2e_measure  # noqa: E402

TOY_CONFIG = REPO / "configs" / "toy.yaml"

STAGES = [
    ["synth"],
    ["prep"],
    ["train-da"],
    ["translate"],
    ["train-seg"],
    ["train-seg", "--real-only"],
    ["infer-seg"],
    ["infer-seg", "--model", "seg_real_only", "--out", "masks_real_only"],
    ["pretrain-koos"],
    ["finetune-koos"],
    ["predict-koos"],
    ["evaluate", "--name", "msfnet"],
    ["evaluate", "--name", "real_only", "--masks", "masks_real_only", "--no-koos"],
    ["report"],
]

THRESHOLDS = {
    "mae_improvement_min": 0.5,
    "vs_dice_gap_min": 0.05,
    "koos_mamse_below_majority": True,
    "disc_fake_accuracy_max": 0.95,
    "wall_time_max_s": 1800,
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", default=None, help="run directory (default: temp)")
    parser.add_argument("--keep", action="store_true", help="keep the run directory")
    args = parser.parse_args()

    if args.root:
        root = Path(args.root)
        root.mkdir(parents=True, exist_ok=True)
        cleanup = None
    else:
        tmp = tempfile.TemporaryDirectory(prefix="msfusion_ref_")
        root = Path(tmp.name)
        cleanup = None if args.keep else tmp

    timings = {}
    started = time.time()
    for argv in STAGES:
        t0 = time.time()
        code = cli.main(argv + ["--config", str(TOY_CONFIG), "--root", str(root)])
        if code != 0:
            print(f"stage {' '.join(argv)} failed with exit code {code}", file=sys.stderr)
            return code
        timings[" ".join(argv)] = round(time.time() - t0, 1)
        print(f"{' '.join(argv):55s} {timings[' '.join(argv)]:7.1f}s")
    wall = time.time() - started

    cfg = load_config(TOY_CONFIG)
    measured = e2e_measure.measure_run(root, cfg)
    record = {
        "recorded_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": "configs/toy.yaml",
        "config_hash": config_hash(cfg),
        "wall_time_s": round(wall, 1),
        "stage_timings_s": timings,
        "measured": measured,
        "thresholds": THRESHOLDS,
    }
    out = REPO / "reference" / "reference_run.json"
    out.parent.mkdir(exist_ok=True)
    out.write_text(json.dumps(record, indent=2) + "\n")
    print(f"\nwrote {out}")
    print(json.dumps(measured, indent=2))

    ok = (measured["mae_improvement"] >= THRESHOLDS["mae_improvement_min"]
          and measured["vs_dice_gap"] >= THRESHOLDS["vs_dice_gap_min"]
          and measured["koos_mamse"] < measured["majority_mamse"]
          and measured["disc_fake_accuracy"] < THRESHOLDS["disc_fake_accuracy_max"]
          and wall <= THRESHOLDS["wall_time_max_s"])
    print("thresholds:", "all satisfied" if ok else "NOT satisfied")
    if cleanup is not None:
        cleanup.cleanup()
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
