"""Run configuration: training schedules, model hyperparameters, INI round trip.

Stage presets follow the two-stage protocol: the region detector trains with
batch size 8, Adam, lr 0.001 for 80 epochs (lr / 10 at epochs 40 and 60);
the depth network trains with batch size 1, SGD, lr 0.001 for 40 epochs
(lr / 10 at epochs 20 and 30).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

STAGES = ("ird", "idpnet")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "idpnet"
    batch_size: int = 1
    base_lr: float = 1e-3
    epochs: int = 40
    lr_drop_epochs: tuple[int, ...] = (20, 30)
    optimizer: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    augment: bool = True
    enable_tiou: bool = True
    enable_tpl: bool = True
    seed: int = 0
    tpl_k: int = 10
    tpl_margin: float = 0.1
    checkpoint_every: int = 0  # 0: final checkpoint only

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs <= 0:
            raise ConfigError(f"epochs={self.epochs} must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size={self.batch_size} must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr={self.base_lr} must be positive")
        drops = self.lr_drop_epochs
        if any(d1 >= d2 for d1, d2 in zip(drops, drops[1:])):
            raise ConfigError(f"lr_drop_epochs {drops} not strictly increasing")
        if drops and (drops[0] < 0 or drops[-1] >= self.epochs):
            raise ConfigError(
                f"lr_drop_epochs {drops} outside [0, {self.epochs})")
        if self.tpl_k < 1:
            raise ConfigError(f"tpl_k={self.tpl_k} must be >= 1")
        if self.tpl_margin <= 0:
            raise ConfigError(f"tpl_margin={self.tpl_margin} must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every={self.checkpoint_every} < 0")


@dataclass(frozen=True)
class ModelConfig:
    # region detector
    ird_widths: tuple[int, ...] = (16, 32, 64, 128)
    ird_deconv_widths: tuple[int, ...] = (64, 48, 32)
    ird_embed_dim: int = 32
    ird_head_width: int = 32
    ird_input_size: int = 128
    heatmap_sigma: float = 8.0
    # depth network
    idp_widths: tuple[int, ...] = (16, 32, 48, 64)
    idp_decoder_widths: tuple[int, ...] = (48, 32, 32)
    idp_head_width: int = 32
    crop_hw: int = 32
    crop_d: int = 64
    # differentiable edge pipeline
    edge_blur_sigma: float = 1.0
    edge_gain: float = 4.0

    def validate(self) -> None:
        if self.ird_input_size % 32 != 0:
            raise ConfigError(
                f"ird_input_size={self.ird_input_size} not divisible by 32")
        if len(self.ird_widths) != 4 or len(self.idp_widths) != 4:
            raise ConfigError("encoder width tuples must have 4 entries")
        if len(self.ird_deconv_widths) != 3 or len(self.idp_decoder_widths) != 3:
            raise ConfigError("decoder width tuples must have 3 entries")
        if self.crop_d % 4 != 0 or self.crop_hw % 16 != 0:
            raise ConfigError(
                f"crop {self.crop_d}x{self.crop_hw} violates stride divisibility "
                f"(depth % 4, spatial % 16)")
        if self.heatmap_sigma <= 0 or self.edge_blur_sigma <= 0:
            raise ConfigError("sigmas must be positive")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        self.train.validate()
        self.model.validate()


def ird_defaults(**overrides) -> RunConfig:
    train = TrainConfig(stage="ird", batch_size=8, base_lr=1e-3, epochs=80,
                        lr_drop_epochs=(40, 60), optimizer="adam")
    return RunConfig(train=dataclasses.replace(train, **overrides))


def idpnet_defaults(**overrides) -> RunConfig:
    train = TrainConfig(stage="idpnet", batch_size=1, base_lr=1e-3, epochs=40,
                        lr_drop_epochs=(20, 30), optimizer="sgd")
    return RunConfig(train=dataclasses.replace(train, **overrides))


def lr_at(epoch: int, config: TrainConfig) -> float:
    """base_lr divided by 10 for every drop epoch at or before `epoch`."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(1 for d in config.lr_drop_epochs if d <= epoch)
    return config.base_lr * (0.1 ** drops)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    if origin is tuple:
        item_type = typing.get_args(annotation)[0]
        raw = raw.strip()
        if not raw:
            return ()
        try:
            return tuple(item_type(part.strip()) for part in raw.split(","))
        except ValueError:
            raise ConfigError(f"bad tuple value for {key}: {raw!r}") from None
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    try:
        return annotation(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _section_to_dataclass(parser: configparser.ConfigParser, section: str,
                          cls):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            kwargs[key] = _parse_value(raw, hints[key], key)
    return cls(**kwargs)


def config_to_text(config: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, obj in (("train", config.train), ("model", config.model)):
        parser.add_section(section)
        for f in dataclasses.fields(obj):
            parser.set(section, f.name, _format_value(getattr(obj, f.name)))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def text_to_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    config = RunConfig(
        train=_section_to_dataclass(parser, "train", TrainConfig),
        model=_section_to_dataclass(parser, "model", ModelConfig),
    )
    config.validate()
    return config


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(config), encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return text_to_config(text)
