"""Plain-text ``section.key = value`` configuration with strict key checking.

Example::

    # comments start with '#'
    data.n_scenes = 100
    world.n_points = 2048
    model.stage_dims = 16, 32, 64, 96
    train.epochs = 40
    lambda.bbox = 0.1
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import DataConfig
from .model import DEFAULT_LAMBDAS, ModelConfig, check_lambdas
from .world import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    scene_lr: float = 1e-5            # fine-tune rate of the pretrained scene encoder; 0 freezes it
    augment: bool = True
    pretrain_mode: str = "distill"    # distill | ce | none
    pretrain_epochs: int = 50
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 4
    text_mode: str = "frozen"         # frozen | trainable
    text_seed: int = 0

    def __post_init__(self):
        for name in ("lr", "pretrain_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.scene_lr < 0:
            raise ConfigError("train.scene_lr must be non-negative")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.pretrain_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if self.pretrain_mode not in ("distill", "ce", "none"):
            raise ConfigError(f"unknown pretrain_mode {self.pretrain_mode!r}")
        if self.text_mode not in ("frozen", "trainable"):
            raise ConfigError(f"unknown text_mode {self.text_mode!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))

    @property
    def world(self) -> WorldConfig:
        return self.data.world

    def to_dict(self) -> dict:
        d = {"data": dataclasses.asdict(self.data), "model": dataclasses.asdict(self.model),
             "train": dataclasses.asdict(self.train), "lambda": dict(self.lambdas)}
        d["world"] = d["data"].pop("world")
        return json.loads(json.dumps(d))  # tuples -> lists, plain JSON types

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            for key, val in values.items():
                lines.append(f"{section}.{key} = {_format(val)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(train={"epochs": 3}, lambda={"bbox": 0})``."""
        return from_pairs(self, [(f"{s}.{k}", v) for s, kv in sections.items() for k, v in kv.items()])


def _format(val) -> str:
    if isinstance(val, (list, tuple)):
        return ", ".join(_format(v) for v in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)


def _coerce(raw, default, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


_SECTIONS = {"data": DataConfig, "world": WorldConfig, "model": ModelConfig, "train": TrainConfig}


def from_pairs(base: RunConfig, pairs) -> RunConfig:
    updates: dict[str, dict] = {s: {} for s in list(_SECTIONS) + ["lambda"]}
    for key, raw in pairs:
        if "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix (data., world., model., train., lambda.)")
        section, name = key.split(".", 1)
        if section not in updates:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")
        if section == "lambda":
            if name not in DEFAULT_LAMBDAS:
                raise ConfigError(f"unknown loss weight {key!r}")
            updates["lambda"][name] = _coerce(raw, 0.0, key)
            continue
        obj = {"data": base.data, "world": base.data.world, "model": base.model, "train": base.train}[section]
        names = [f.name for f in dataclasses.fields(obj) if f.name != "world"]
        if name not in names:
            raise ConfigError(f"unknown key {key!r}")
        updates[section][name] = _coerce(raw, getattr(obj, name), key)
    try:
        world = replace(base.data.world, **updates["world"])
        data = replace(base.data, world=world, **updates["data"])
        model = replace(base.model, **updates["model"])
        train = replace(base.train, **updates["train"])
        lambdas = check_lambdas({**base.lambdas, **updates["lambda"]})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if model.feature_dim != world.feature_dim:
        raise ConfigError("model.feature_dim must equal world.feature_dim (one shared text space)")
    if model.frames != world.frames:
        raise ConfigError("model.frames must equal world.frames")
    return RunConfig(data, model, train, lambdas)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    keys = [k for k, _ in pairs]
    dup = {k for k in keys if keys.count(k) > 1}
    if dup:
        raise ConfigError(f"duplicate keys: {', '.join(sorted(dup))}")
    return from_pairs(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    return parse_config(text)
