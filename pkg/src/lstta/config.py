"""Run configuration: a fixed key schema read from YAML, overridable by flags.

Layout of a config document (every key optional)::

    profile: desk            # or "paper" (parameter counting only)
    model: {D, D_h, K, L, T, Nv, Na, Nl, num_classes, vocab, encoder_seed}
    train: {lr0, steps, batch, seed, weight_decay, clip, warmup, log_every, precision}
    data: {num_train, num_eval, distractor_rate, seed, queried_attribute}
    ablation: {ltsf, al2v, vl2a, latent_tokens}
    paths: {data, eval_data, out_dir, checkpoint}
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .model import Ablation, ModelConfig
from .toydata import DatasetSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    D: int = 32
    D_h: int = 16
    K: int = 8
    L: int = 4
    T: int = 8
    Nv: int = 16
    Na: int = 16
    Nl: int = 12
    num_classes: int = 4
    vocab: int = 64
    encoder_seed: int = 0


@dataclass
class TrainSection:
    lr0: float = 3e-3
    steps: int = 3000
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    clip: float | None = 1.0
    warmup: int = 0
    log_every: int = 250
    precision: str = "float32"


@dataclass
class DataSection:
    num_train: int = 4000
    num_eval: int = 1000
    distractor_rate: float = 0.2
    seed: int = 0
    queried_attribute: bool = False


@dataclass
class AblationSection:
    ltsf: bool = True
    al2v: bool = True
    vl2a: bool = True
    latent_tokens: bool = True


@dataclass
class PathSection:
    data: str | None = None
    eval_data: str | None = None
    out_dir: str = "runs/default"
    checkpoint: str | None = None


SECTIONS = {
    "model": ModelSection,
    "train": TrainSection,
    "data": DataSection,
    "ablation": AblationSection,
    "paths": PathSection,
}

PROFILES = ("desk", "paper")
PRECISIONS = ("float32", "float64")
# full-scale shapes; only parameter counting is supported at this size
PAPER_MODEL = {"D": 1024, "D_h": 512, "K": 64, "L": 24, "T": 32}


@dataclass
class RunConfig:
    profile: str = "desk"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"profile": self.profile}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in fields(sec)}
        return out

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(d=m.D, d_h=m.D_h, k=m.K, layers=m.L, t=m.T, nv=m.Nv, na=m.Na, nl=m.Nl,
                           num_classes=m.num_classes, vocab=m.vocab, encoder_seed=m.encoder_seed,
                           init_seed=self.train.seed, ablation=self.ablation_flags())

    def ablation_flags(self) -> Ablation:
        a = self.ablation
        return Ablation(a.ltsf, a.al2v, a.vl2a, a.latent_tokens)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr0=t.lr0, steps=t.steps, batch=t.batch, seed=t.seed,
                           weight_decay=t.weight_decay, clip=t.clip, warmup=t.warmup, log_every=t.log_every)

    def dataset_spec(self, split: str) -> DatasetSpec:
        """Generator settings for ``train`` or ``eval``; the splits use disjoint seeds."""
        d, m = self.data, self.model
        if split not in ("train", "eval"):
            raise ConfigError(f"unknown split {split!r}")
        n = d.num_train if split == "train" else d.num_eval
        seed = d.seed if split == "train" else d.seed + 1000
        return DatasetSpec(num_samples=n, T=m.T, Nv=m.Nv, Na=m.Na, Nl=m.Nl, C=m.num_classes, vocab=m.vocab,
                           distractor_rate=d.distractor_rate, seed=seed, queried_attribute=d.queried_attribute)

    def with_ablation(self, ab: Ablation) -> "RunConfig":
        out = copy.deepcopy(self)
        out.ablation = AblationSection(ab.ltsf, ab.al2v, ab.vl2a, ab.latent_tokens)
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with both the training seed and the data seed set to ``seed``."""
        out = copy.deepcopy(self)
        out.train = replace(out.train, seed=seed)
        out.data = replace(out.data, seed=seed)
        return out

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        m, t, d = self.model, self.train, self.data
        for name in ("D", "D_h", "K", "L", "T", "Nv", "Na", "Nl", "vocab"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if m.D_h >= m.D:
            raise ConfigError("model.D_h must be smaller than model.D")
        if m.num_classes < 2:
            raise ConfigError("model.num_classes must be at least 2")
        if m.vocab < m.num_classes + 4:
            raise ConfigError("model.vocab too small for the class and noise tokens")
        if t.lr0 < 0 or t.steps < 0 or t.batch < 1 or t.weight_decay < 0 or t.warmup < 0 or t.log_every < 0:
            raise ConfigError("train settings must be nonnegative (batch at least 1)")
        if t.warmup > t.steps:
            raise ConfigError("train.warmup exceeds train.steps")
        if t.clip is not None and t.clip <= 0:
            raise ConfigError("train.clip must be positive or null")
        if t.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {PRECISIONS}")
        if not 0.0 <= d.distractor_rate <= 1.0:
            raise ConfigError("data.distractor_rate must lie in [0, 1]")
        if d.num_train < 0 or d.num_eval < 0:
            raise ConfigError("data sizes must be nonnegative")


def _coerce(section: str, key: str, value: Any, default: Any, annotation: str) -> Any:
    where = f"{section}.{key}"
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{where} may not be null")
    if isinstance(default, bool) or annotation == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            return value.lower() in ("true", "1", "yes", "on")
        raise ConfigError(f"{where} must be a boolean, got {value!r}")
    try:
        if annotation.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if annotation.startswith("float"):
            return float(value)
        if annotation.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} has invalid value {value!r}") from None
    return value


def _apply(cfg: RunConfig, doc: dict[str, Any], origin: str) -> None:
    for key, value in doc.items():
        if key == "profile":
            cfg.profile = str(value)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section {key!r}")
        if value is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{origin}: section {key!r} must be a mapping")
        sec = getattr(cfg, key)
        known = {f.name: f for f in fields(sec)}
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"{origin}: unknown key {key}.{k}")
            f = known[k]
            setattr(sec, k, _coerce(key, k, v, getattr(sec, k), str(f.type)))


def apply_profile(cfg: RunConfig) -> None:
    if cfg.profile == "paper":
        for k, v in PAPER_MODEL.items():
            setattr(cfg.model, k, v)


def config_from_dict(doc: dict[str, Any], origin: str = "config") -> RunConfig:
    """Rebuild a config from its ``to_dict`` form, e.g. a checkpoint echo."""
    return _resolve(doc, None, None, origin)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                profile: str | None = None) -> RunConfig:
    """Defaults, then the profile, then the YAML file, then ``overrides`` (dotted keys)."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return _resolve(doc, overrides, profile, str(path))


def _resolve(doc: dict[str, Any], overrides: dict[str, Any] | None, profile: str | None,
             origin: str) -> RunConfig:
    cfg = RunConfig()
    cfg.profile = profile or str(doc.get("profile", cfg.profile))
    if cfg.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {cfg.profile!r}")
    apply_profile(cfg)
    _apply(cfg, {k: v for k, v in doc.items() if k != "profile"}, origin)
    nested: dict[str, dict[str, Any]] = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        nested.setdefault(section, {})[key] = value
    _apply(cfg, nested, "flags")
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
