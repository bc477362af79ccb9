import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from msfusion import cli
from msfusion.config import load_config
from msfusion.phantom import PhantomSpec, generate_cohort, generate_subject

REPO = Path(__file__).resolve().parents[1]
TOY_CONFIG = REPO / "configs" / "toy.yaml"


@pytest.fixture(autouse=True)
def _limit_threads():
    torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom_pair():
    """One small two-modality subject shared by read-only tests."""
    return generate_subject(PhantomSpec(seed=11), 0)


@pytest.fixture(scope="session")
def phantom_cohort():
    spec = PhantomSpec(seed=21)
    return generate_cohort(spec, 4, start=0, prefix="s", balance_grades=True)


def run_stage(argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Full pipeline executed once through the CLI with the shipped toy
    config; later tests and the acceptance suite read its artifacts."""
    root = tmp_path_factory.mktemp("toy_run")
    started = time.time()
    stages = [
        ["synth", "--config", TOY_CONFIG, "--root", root],
        ["prep", "--config", TOY_CONFIG, "--root", root],
        ["train-da", "--config", TOY_CONFIG, "--root", root],
        ["translate", "--config", TOY_CONFIG, "--root", root],
        ["train-seg", "--config", TOY_CONFIG, "--root", root],
        ["train-seg", "--config", TOY_CONFIG, "--root", root, "--real-only"],
        ["infer-seg", "--config", TOY_CONFIG, "--root", root],
        ["infer-seg", "--config", TOY_CONFIG, "--root", root,
         "--model", "seg_real_only", "--out", "masks_real_only"],
        ["pretrain-koos", "--config", TOY_CONFIG, "--root", root],
        ["finetune-koos", "--config", TOY_CONFIG, "--root", root],
        ["predict-koos", "--config", TOY_CONFIG, "--root", root],
        ["evaluate", "--config", TOY_CONFIG, "--root", root, "--name", "msfnet"],
        ["evaluate", "--config", TOY_CONFIG, "--root", root,
         "--name", "real_only", "--masks", "masks_real_only", "--no-koos"],
        ["report", "--config", TOY_CONFIG, "--root", root],
    ]
    timings = {}
    for argv in stages:
        t0 = time.time()
        code = run_stage(argv)
        assert code == 0, f"stage {argv[0]} failed with exit code {code}"
        timings[" ".join(str(a) for a in argv[:1] + argv[5:])] = time.time() - t0
    return {
        "root": root,
        "config": load_config(TOY_CONFIG),
        "config_path": TOY_CONFIG,
        "wall_time_s": time.time() - started,
        "timings": timings,
    }
