import dataclasses

import pytest

from msfusion.cli import apply_ablation, apply_koos_flags, build_parser
from msfusion.config import (
    KoosStageConfig,
    MsfnetStageConfig,
    PipelineConfig,
    config_hash,
    load_config,
    stage_seed,
)
from msfusion.errors import ConfigError
from msfusion.msfnet import MsfnetTrainConfig


class TestDefaults:
    def test_published_training_schedule(self):
        cfg = PipelineConfig()
        assert cfg.msfnet.lr == 2e-4
        assert cfg.msfnet.epochs == 1000
        assert cfg.msfnet.batch_size == 1
        assert cfg.koos.pretrain_lr == 1e-2
        assert cfg.koos.pretrain_epochs == 100
        assert cfg.koos.pretrain_batch == 4
        assert cfg.koos.finetune_lr == 1e-4
        assert cfg.koos.finetune_epochs == 20
        assert cfg.msfnet.lambda_r == 10.0
        assert cfg.msfnet.lambda_p == 0.01

    def test_preprocessing_constants(self):
        cfg = PipelineConfig()
        assert cfg.prep.target_spacing == (1.0, 0.4102, 0.4102)
        assert cfg.prep.crop_size == (80, 256, 256)
        assert cfg.prep.mi_bins == 32
        assert cfg.prep.atlas_id is None  # required, never defaulted


class TestLoading:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("")
        assert load_config(p) == PipelineConfig()

    def test_partial_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 5\nmsfnet:\n  epochs: 3\n")
        cfg = load_config(p)
        assert cfg.seed == 5
        assert cfg.msfnet.epochs == 3
        assert cfg.msfnet.lr == 2e-4  # untouched default

    def test_unknown_key_rejected_with_line(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 1\nmsfnet:\n  epochs: 2\n  warmup: 7\n")
        with pytest.raises(ConfigError, match=r"c\.yaml:4.*msfnet\.warmup"):
            load_config(p)

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("sed: 1\n")
        with pytest.raises(ConfigError, match=r"c\.yaml:1"):
            load_config(p)

    def test_parse_error_is_config_error(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")

    def test_tuples_coerced(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("prep:\n  target_spacing: [1.0, 1.0, 1.0]\n")
        cfg = load_config(p)
        assert cfg.prep.target_spacing == (1.0, 1.0, 1.0)

    def test_shipped_toy_config_loads(self):
        from conftest import TOY_CONFIG

        cfg = load_config(TOY_CONFIG)
        assert cfg.prep.atlas_id == "b006"
        assert cfg.msfnet.profile == "toy"


class TestSeedsAndHash:
    def test_stage_seeds_differ_by_stage(self):
        seeds = {stage_seed(0, s) for s in ("synth", "prep", "train-da", "translate")}
        assert len(seeds) == 4

    def test_stage_seed_deterministic(self):
        assert stage_seed(42, "prep") == stage_seed(42, "prep")
        assert stage_seed(42, "prep") != stage_seed(43, "prep")

    def test_config_hash_changes_with_content(self):
        a = PipelineConfig()
        b = dataclasses.replace(a, seed=9)
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(PipelineConfig())


class TestAblationDeltas:
    """The CLI flags must map onto exact configuration deltas."""

    def test_translation_ablation_deltas(self):
        base = MsfnetTrainConfig(epochs=2, profile="tiny")
        no_gif = dataclasses.replace(base, ablate_gif=True)
        no_both = dataclasses.replace(base, ablate_vs=True, ablate_gif=True)
        # w/o GIF: only the gif flag differs
        diff = {
            f.name
            for f in dataclasses.fields(base)
            if getattr(base, f.name) != getattr(no_gif, f.name)
        }
        assert diff == {"ablate_gif"}
        diff_both = {
            f.name
            for f in dataclasses.fields(base)
            if getattr(base, f.name) != getattr(no_both, f.name)
        }
        assert diff_both == {"ablate_vs", "ablate_gif"}

    def test_cli_ablate_parsing(self):
        parser = build_parser()
        args = parser.parse_args(["train-da", "--config", "x.yaml", "--ablate", "vs,gif"])
        assert args.ablate == "vs,gif"
        with pytest.raises(ConfigError):
            apply_ablation(PipelineConfig(), ("proxy",))

    def test_koos_flag_deltas(self):
        base = PipelineConfig()
        unfrozen = apply_koos_flags(base, no_freeze=True, no_pretrain=False)
        assert unfrozen.koos == dataclasses.replace(base.koos, freeze=False)
        assert unfrozen.msfnet == base.msfnet  # nothing else moved
        no_pre = apply_koos_flags(base, no_freeze=False, no_pretrain=True)
        assert no_pre.koos == dataclasses.replace(base.koos, pretrain=False)
        both = apply_koos_flags(base, no_freeze=True, no_pretrain=True)
        assert both.koos == dataclasses.replace(base.koos, freeze=False, pretrain=False)

    def test_koos_defaults_are_paper_arms(self):
        cfg = KoosStageConfig()
        assert cfg.freeze is True
        assert cfg.pretrain is True
