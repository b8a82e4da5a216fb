"""Run configuration: one strict JSON document drives every command.

The document has six optional sections (paths, dsp, corpus, train, model,
analysis) plus a global seed.  Unknown keys anywhere are rejected with the
full dotted path, so typos fail loudly instead of silently using defaults.
Sections map one-to-one onto the module configuration dataclasses; the
global seed is inherited by the corpus and training sections unless they
pin their own.
"""

from dataclasses import dataclass, field, fields as dataclass_fields
import json

import numpy as np

from .augment import MixSpec, TrainConfig
from .corpus import CorpusConfig
from .dsp import DspConfig
from .model import ModelConfig

__all__ = [
    "ConfigError",
    "PathsConfig",
    "TrainSection",
    "ModelSection",
    "AnalysisSection",
    "RunConfig",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    results: str = "results"


@dataclass(frozen=True)
class TrainSection:
    """Training hyperparameters; mode and interference come from the CLI."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha_min: float = 0.1
    alpha_max: float = 2.0
    seed: int = None  # None: inherit the run seed
    crop_seconds: float = 1.0  # random training crops; evaluation always sees full utterances

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be positive")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ConfigError("train alpha bounds need 0 < alpha_min <= alpha_max")


@dataclass(frozen=True)
class ModelSection:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    embedding_dim: int = 64
    se_reduction: int = 8


@dataclass(frozen=True)
class AnalysisSection:
    retention_rho: float = 0.1875
    deletion_thresholds: int = 21
    max_utterances: int = None  # per-protocol cap on evaluation utterances
    eval_ks: tuple = (1, 5, 10)

    def __post_init__(self):
        if self.retention_rho <= 0:
            raise ConfigError("analysis.retention_rho must be positive")
        if self.deletion_thresholds < 2:
            raise ConfigError("analysis.deletion_thresholds must be at least 2")
        if self.max_utterances is not None and self.max_utterances < 1:
            raise ConfigError("analysis.max_utterances must be positive when set")
        if not self.eval_ks or list(self.eval_ks) != sorted(set(self.eval_ks)):
            raise ConfigError("analysis.eval_ks must be distinct and ascending")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    document: dict = field(default_factory=dict)  # the JSON as loaded

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def train_config(self, mode: str, interference: str = None) -> TrainConfig:
        t = self.train
        if mode == "base":
            mix = None
        else:
            if interference is None:
                raise ConfigError(f"mode {mode} requires --interference")
            mix = MixSpec(interference, t.alpha_min, t.alpha_max)
        try:
            return TrainConfig(
                mode=mode,
                epochs=t.epochs,
                batch_size=t.batch_size,
                learning_rate=t.learning_rate,
                momentum=t.momentum,
                mix=mix,
                seed=self.train_seed,
                crop_seconds=t.crop_seconds,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_speakers=self.corpus.n_speakers,
            n_mels=self.dsp.n_mels,
            stage_channels=tuple(m.stage_channels),
            blocks_per_stage=tuple(m.blocks_per_stage),
            embedding_dim=m.embedding_dim,
            se_reduction=m.se_reduction,
            seed=self.train_seed,
        )

    def deletion_threshold_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.analysis.deletion_thresholds)


_SECTIONS = {
    "paths": PathsConfig,
    "dsp": DspConfig,
    "corpus": CorpusConfig,
    "train": TrainSection,
    "model": ModelSection,
    "analysis": AnalysisSection,
}


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where} must be an object")
    allowed = {f.name for f in dataclass_fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, seed_override: int = None) -> RunConfig:
    """Parse a run configuration file; None loads pure defaults."""
    if path is None:
        doc = {}
    else:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for key in doc:
        if key != "seed" and key not in _SECTIONS:
            raise ConfigError(f"unknown key {key}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    if seed_override is not None:
        seed = int(seed_override)

    sections = {}
    for name, cls in _SECTIONS.items():
        data = dict(doc.get(name, {}))
        if name == "corpus" and "seed" not in data:
            data["seed"] = seed
        sections[name] = _build_section(cls, data, name)
    return RunConfig(seed=seed, document=doc, **sections)
