"""Pipeline configuration: one YAML file covering every stage.

Unknown keys are rejected with file:line anchors. Defaults reproduce the
published training schedule (translation 1000 epochs at lr 2e-4 batch 1,
contrastive pretraining 100 epochs at lr 1e-2 batch 4, fine-tuning 20
epochs at lr 1e-4).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class DirsConfig:
    raw: str = "data/raw"
    prep: str = "data/prep"
    translated: str = "data/translated"
    models: str = "models"
    preds: str = "preds"
    reports: str = "reports"


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 6
    n_eval: int = 4
    shape: tuple[int, int, int] = (24, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.015
    balance_grades: bool = True


@dataclass(frozen=True)
class PrepStageConfig:
    target_spacing: tuple[float, float, float] = (1.0, 0.4102, 0.4102)
    n_quantiles: int = 256
    atlas_id: str | None = None  # required at run time, no silent default
    crop_size: tuple[int, int, int] = (80, 256, 256)
    crop_start: tuple[int, int, int] | None = None
    mi_bins: int = 32
    levels: tuple[int, ...] = (4, 2, 1)
    iterations: tuple[int, ...] = (6, 4, 2)
    dof: str = "affine"
    reference_t1: str | None = None  # histogram reference subject for modality 1


@dataclass(frozen=True)
class MsfnetStageConfig:
    profile: str = "default"
    epochs: int = 1000
    lr: float = 2e-4
    batch_size: int = 1
    lambda_r: float = 10.0
    lambda_p: float = 0.01
    adversarial: float = 1.0
    cycle: float = 1.0
    proxy: float = 1.0
    perceptual: str = "random"
    vgg_weights: str | None = None
    checkpoint_every: int = 10


@dataclass(frozen=True)
class SegStageConfig:
    profile: str = "default"
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 8
    augment: bool = True


@dataclass(frozen=True)
class KoosStageConfig:
    profile: str = "default"
    tau: float = 0.1
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 4
    weight_self: float = 1.0
    weight_sup: float = 1.0
    finetune_epochs: int = 20
    finetune_lr: float = 1e-4
    finetune_batch: int = 4
    freeze: bool = True
    pretrain: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    dirs: DirsConfig = field(default_factory=DirsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    prep: PrepStageConfig = field(default_factory=PrepStageConfig)
    msfnet: MsfnetStageConfig = field(default_factory=MsfnetStageConfig)
    seg: SegStageConfig = field(default_factory=SegStageConfig)
    koos: KoosStageConfig = field(default_factory=KoosStageConfig)


_SECTIONS = {
    "dirs": DirsConfig,
    "synth": SynthConfig,
    "prep": PrepStageConfig,
    "msfnet": MsfnetStageConfig,
    "seg": SegStageConfig,
    "koos": KoosStageConfig,
}


def _key_lines(node, prefix="") -> dict[str, int]:
    """Map of dotted key path -> 1-based line number."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, val_node in node.value:
            path = f"{prefix}{key_node.value}"
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(val_node, prefix=f"{path}."))
    return lines


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _build_section(cls, mapping, lines, prefix, filename):
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in mapping.items():
        where = f"{filename}:{lines.get(prefix + key, '?')}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key '{prefix + key}'")
        if key in _SECTIONS and cls is PipelineConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: section '{key}' must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, lines, f"{key}.", filename)
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{filename}: bad section '{prefix.rstrip('.')}': {e}") from e


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if data is None:
        return PipelineConfig()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    lines = _key_lines(node) if node is not None else {}
    return _build_section(PipelineConfig, data, lines, "", str(path))


def config_hash(cfg: PipelineConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage sub-seed derived from the global seed and the stage name."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
