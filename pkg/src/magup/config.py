"""Run configuration: one JSON document mirroring the config dataclass tree.

Unknown keys anywhere in the document are rejected (typo safety); missing
keys fall back to dataclass defaults. `null` clears an optional section
(adapter, distiller). The same machinery converts checkpoint headers back
into model configs.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .adapter import MaGuPConfig
from .bdc import BDCConfig
from .data import SynthConfig
from .errors import ConfigError
from .model import EncoderConfig, ModelConfig, TrainConfig

ABLATION_NAMES = ("msd", "1dmamba", "2dmamba", "bdc")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bdc: BDCConfig | None = field(default_factory=BDCConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


def _build(cls, data, where: str):
    """Construct dataclass `cls` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]!r}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        optional = False
        if isinstance(hint, types.UnionType):
            args = [a for a in typing.get_args(hint) if a is not type(None)]
            optional = len(typing.get_args(hint)) > len(args)
            hint = args[0] if args else hint
        if value is None:
            if not optional:
                raise ConfigError(f"{where}.{name} may not be null")
            kwargs[name] = None
        elif is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        elif hint is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def default_run_config() -> RunConfig:
    return RunConfig()


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return _build(RunConfig, data, "config")


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_ablations(cfg: RunConfig, names) -> RunConfig:
    """Disable the listed components (table-of-toggles semantics)."""
    for name in names:
        if name not in ABLATION_NAMES:
            raise ConfigError(
                f"unknown ablation {name!r}; choose from {', '.join(ABLATION_NAMES)}"
            )
        if name == "bdc":
            cfg.bdc = None
            continue
        if cfg.encoder.adapter is None:
            raise ConfigError(f"cannot ablate {name!r}: adapter disabled entirely")
        toggle = {"msd": "msd", "1dmamba": "mamba1d", "2dmamba": "mamba2d"}[name]
        setattr(cfg.encoder.adapter, toggle, False)
    return cfg


def model_config_from_run(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(encoder=cfg.encoder, bdc=cfg.bdc, seed=cfg.train.seed)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(data: dict) -> ModelConfig:
    return _build(ModelConfig, data, "checkpoint.config")
