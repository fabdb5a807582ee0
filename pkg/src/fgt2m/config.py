"""Run configuration: nested dataclasses addressed by flat dotted keys.

A config file is YAML, either nested (``model: {width: 64}``) or flat
(``model.width: 64``). Command-line overrides use the same keys
(``--model.width=32``). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

SEED_ENV = "FGT2M_SEED"


@dataclass
class DiffusionConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    clip_x0: float | None = None  # clamp x0 predictions to +-clip_x0 (normalized units)


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    capr_blocks: int = 3
    # key is "model.lambda" in files; ``lambda`` is reserved in Python
    lam: float = 0.1
    block_layer_order: str = "deep_first"
    ff_mult: int = 2


@dataclass
class LsamConfig:
    gat_layers: int = 3
    edge_dim: int = 16
    upos_gains: bool = True
    heads: int = 1
    leaky_slope: float = 0.2


@dataclass
class TextConfig:
    mode: str = "trainable"  # trainable | hashed | external
    dim: int = 64
    n_max: int = 16
    hash_buckets: int = 512
    embedding_file: str | None = None


@dataclass
class DataConfig:
    records: int = 2000
    frames: int = 64
    seed: int = 0
    holdout: float = 0.1
    path: str = "data/toy.fgds"


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch: int = 128
    iters: int = 4000
    seed: int = 0
    log_every: int = 100
    eval_every: int = 0  # 0: metrics only after the last iteration
    patience: int = 0  # early stop after this many non-improving logs; 0 disables
    grad_clip: float = 1.0
    out_dir: str = "runs/default"


@dataclass
class EvalConfig:
    pool_size: int = 32
    repeats: int = 5
    seed: int = 0
    diversity_subset: int = 50
    mm_texts: int = 16
    mm_generations: int = 32
    mm_pairs: int = 10
    embed_dim: int = 32
    embed_epochs: int = 60
    embed_lr: float = 2e-3
    max_test: int = 0  # cap on held-out records scored; 0 keeps all


@dataclass
class AblationConfig:
    lsam_off: bool = False
    capr1_off: bool = False
    capr2_off: bool = False
    block_layer_order: str | None = None  # overrides model.block_layer_order when set


@dataclass
class RunConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lsam: LsamConfig = field(default_factory=LsamConfig)
    text: TextConfig = field(default_factory=TextConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def block_layer_order(self) -> str:
        return self.ablation.block_layer_order or self.model.block_layer_order

    def flat(self) -> dict:
        out = {}
        for section in dataclasses.fields(self):
            sub = getattr(self, section.name)
            for f in dataclasses.fields(sub):
                out[f"{section.name}.{_file_key(f.name)}"] = getattr(sub, f.name)
        return out

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        name = _attr_name(name)
        sub = getattr(self, section, None)
        if sub is None or not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigurationError(f"unknown config key {key!r}")
        ftype = {f.name: f.type for f in dataclasses.fields(sub)}[name]
        setattr(sub, name, _coerce(key, value, ftype))

    def validate(self) -> None:
        m, l = self.model, self.lsam
        if self.block_layer_order not in ("deep_first", "shallow_first"):
            raise ConfigurationError("block_layer_order must be deep_first or shallow_first")
        if m.width % m.heads:
            raise ConfigurationError("model.width must be divisible by model.heads")
        if not self.ablation.lsam_off and m.capr_blocks != l.gat_layers:
            raise ConfigurationError(
                f"model.capr_blocks ({m.capr_blocks}) must equal lsam.gat_layers ({l.gat_layers})"
            )
        if self.text.dim % l.heads:
            raise ConfigurationError("text.dim must be divisible by lsam.heads")
        if m.lam < 0:
            raise ConfigurationError("model.lambda must be >= 0")
        if self.text.mode not in ("trainable", "hashed", "external"):
            raise ConfigurationError(f"unknown text.mode {self.text.mode!r}")
        if self.text.mode == "external" and not self.text.embedding_file:
            raise ConfigurationError("text.mode=external needs text.embedding_file")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.flat(), sort_keys=True)


def _file_key(attr: str) -> str:
    return "lambda" if attr == "lam" else attr


def _attr_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def _coerce(key, value, ftype):
    if isinstance(value, str):
        if value.lower() in ("none", "null", ""):
            value = None
        else:
            try:
                value = yaml.safe_load(value)
            except yaml.YAMLError:
                pass
    ftype = str(ftype)
    if value is None:
        if "None" in ftype:
            return None
        raise ConfigurationError(f"{key} may not be null")
    try:
        if ftype.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if ftype.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if ftype.startswith("float"):
            return float(value)
        if ftype.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigurationError(f"bad value {value!r} for {key} ({ftype})")


def _flatten(tree, prefix=""):
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse config {path}: {e}") from None
        if not isinstance(tree, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
        for key, value in _flatten(tree):
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        for key in ("data.seed", "train.seed", "eval.seed"):
            cfg.set(key, seed)
    cfg.validate()
    return cfg
