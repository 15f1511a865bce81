"""Plain key=value config files with sections, resolved to typed configs.

The SCA_SEED environment variable overrides the config seed.  Any learning
rate above 4e-4 is rejected at load time regardless of other settings.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace

from .encoder import EncoderConfig
from .lm import LMConfig, LMTrainConfig
from .mixer import MixerConfig
from .model import DESK_MIXER, ModelConfig
from .scenegen import SceneConfig
from .trainer import LR_CEILING, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    detection_scenes: int = 220
    caption_scenes: int = 22
    val_scenes: int = 24
    lm_sentences: int = 4000


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    lm_train: LMTrainConfig
    data: DataConfig
    seed: int = 0
    prefit_steps: int = 0
    prefit_lr: float = 1e-3


_SECTION_TYPES = {
    "scene": SceneConfig,
    "encoder": EncoderConfig,
    "mixer": MixerConfig,
    "lm": LMConfig,
    "lm_train": LMTrainConfig,
    "train": TrainConfig,
    "data": DataConfig,
}
_RUN_KEYS = {"seed": int, "prefit_steps": int, "prefit_lr": float}


def _coerce(raw: str, kind):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if kind is tuple or str(kind).startswith("tuple"):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return kind(raw)


def _apply_section(base, items: dict, section: str):
    known = {f.name: f.type for f in fields(base)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(base, key)
        kind = type(current) if current is not None else float
        if isinstance(current, tuple):
            kind = tuple
        try:
            updates[key] = _coerce(raw, kind)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})")
    return replace(base, **updates) if updates else base


def default_run_config() -> RunConfig:
    return RunConfig(model=ModelConfig(), train=TrainConfig(),
                     lm_train=LMTrainConfig(steps=1200), data=DataConfig())


def load_run_config(path: str | None) -> RunConfig:
    """Parse a config file (or defaults when path is None) and validate it."""
    scene, enc = SceneConfig(), EncoderConfig()
    mixr, lmc = DESK_MIXER, LMConfig()
    lmt, train, data = LMTrainConfig(steps=1200), TrainConfig(), DataConfig()
    run_extra = {"seed": 0, "prefit_steps": 0, "prefit_lr": 1e-3}

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            items = dict(parser.items(section))
            if section == "run":
                for key, raw in items.items():
                    if key not in _RUN_KEYS:
                        raise ConfigError(f"unknown key {key!r} in section [run]")
                    run_extra[key] = _RUN_KEYS[key](raw)
            elif section == "scene":
                scene = _apply_section(scene, items, section)
            elif section == "encoder":
                enc = _apply_section(enc, items, section)
            elif section == "mixer":
                mixr = _apply_section(mixr, items, section)
            elif section == "lm":
                lmc = _apply_section(lmc, items, section)
            elif section == "lm_train":
                lmt = _apply_section(lmt, items, section)
            elif section == "train":
                train = _apply_section(train, items, section)
            elif section == "data":
                data = _apply_section(data, items, section)
            else:
                raise ConfigError(f"unknown config section [{section}]")

    env_seed = os.environ.get("SCA_SEED")
    if env_seed is not None:
        run_extra["seed"] = int(env_seed)

    for name, lr in (("mixer_lr", train.mixer_lr), ("lm_lr", train.lm_lr)):
        if lr > LR_CEILING:
            raise ConfigError(
                f"{name}={lr} exceeds the learning-rate ceiling {LR_CEILING}")
    if train.lsj is not None and len(train.lsj) not in (0, 2):
        raise ConfigError(f"lsj wants two values, got {train.lsj}")
    if train.lsj is not None and len(train.lsj) == 0:
        train = replace(train, lsj=None)

    model = ModelConfig(scene=scene, encoder=enc, mixer=mixr, lm=lmc)
    return RunConfig(model=model, train=train, lm_train=lmt, data=data,
                     seed=run_extra["seed"], prefit_steps=run_extra["prefit_steps"],
                     prefit_lr=run_extra["prefit_lr"])
