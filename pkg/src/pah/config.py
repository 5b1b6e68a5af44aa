"""Run configuration and its line-oriented ``key = value`` file format.

Grammar, one entry per line::

    # comment
    seed = 3
    model.proto_h = 10
    loss.stability = 0.5

Top-level fields are bare keys; nested fields use ``section.field``. Values
are parsed according to the dataclass field type. Every field has a default,
so an empty file is a valid configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | archive
    archive: str = ""
    manifest: str = ""
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 40
    test_samples_per_class: int = 25
    channels: int = 3
    height: int = 16
    width: int = 16
    noise: float = 0.8
    template_grid: int = 4
    split_seed: int = 0


@dataclass
class ModelConfig:
    hidden: int = 256
    feature_dim: int = 64
    hyper_hidden: int = 128
    proto_h: int = 10
    proto_w: int = 10
    init: str = "semantic"  # semantic | random
    proto_std: float = 0.1


@dataclass
class OptimConfig:
    kind: str = "adam"  # adam | sgd
    lr: float = 1e-3
    proto_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.data.source not in ("synthetic", "archive"):
            raise ConfigError(f"data.source must be synthetic or archive, got {self.data.source!r}")
        if self.model.init not in ("semantic", "random"):
            raise ConfigError(f"model.init must be semantic or random, got {self.model.init!r}")
        if self.optim.kind not in ("adam", "sgd"):
            raise ConfigError(f"optim.kind must be adam or sgd, got {self.optim.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.loss.lsp_old_inputs not in ("live", "snapshot"):
            raise ConfigError("loss.lsp_old_inputs must be live or snapshot")
        if self.loss.stability < 0 or self.loss.w_sp < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.loss.temperature <= 0:
            raise ConfigError("loss.temperature must be positive")
        positive = {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "data.num_tasks": self.data.num_tasks, "model.proto_h": self.model.proto_h,
            "model.proto_w": self.model.proto_w, "model.hidden": self.model.hidden,
            "model.feature_dim": self.model.feature_dim,
        }
        for key, val in positive.items():
            if val < 1:
                raise ConfigError(f"{key} must be >= 1, got {val}")
        if self.data.classes_per_task < 2:
            raise ConfigError("data.classes_per_task must be >= 2")
        return self


_SECTIONS = ("data", "model", "loss", "optim")


def _coerce(raw: str, typ, key: str):
    if typ in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if typ in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    return raw


def _fields(obj) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj)}


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    """Assign a dotted key from its string form."""
    parts = key.split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
        if name in _SECTIONS:
            raise ConfigError(f"{key} is a section, not a field")
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target, name = getattr(cfg, parts[0]), parts[1]
    else:
        raise ConfigError(f"unknown key {key!r}")
    fmap = _fields(target)
    if name not in fmap:
        raise ConfigError(f"unknown key {key!r}")
    setattr(target, name, _coerce(raw, fmap[name].type, key))


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            set_value(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg.validate()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        lines.append("")
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
