"""
INI configuration <-> RunConfig.

Each INI section maps to one RunConfig attribute and `section.key` is the
dotted key path used in error messages and overrides.
"""

import configparser
import os
from typing import Any, Dict, Mapping

from pydantic import ValidationError

from sources.diffusion import DiffusionSchedule
from sources.errors import ConfigError
from sources.logger import Logger
from sources.model import ModelConfig
from sources.posenc import PEConfig
from sources.schemas import RunConfig

logger = Logger("config.log")


def _format_validation_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    key = ".".join(str(part) for part in first["loc"])
    message = first["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    head, sep, rest = message.partition(": ")
    if sep and "." in head and " " not in head:
        return ConfigError(rest, key=head)
    if not key:
        return ConfigError(message)
    if first["type"] == "extra_forbidden":
        message = "unknown key"
    return ConfigError(message, key=key)


def from_mapping(sections: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    try:
        return RunConfig.model_validate({name: dict(values) for name, values in sections.items()})
    except ValidationError as exc:
        error = _format_validation_error(exc)
        logger.error(f"invalid configuration: {error}")
        raise error from None


def load_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from None
    return from_mapping({name: parser[name] for name in parser.sections()})


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"configuration file '{path}' not found")
    with open(path, "r", encoding="utf-8") as f:
        cfg = load_config_text(f.read())
    logger.info(f"loaded configuration from {path}")
    return cfg


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_ini(cfg: RunConfig) -> str:
    """Canonical INI text: sections and keys in declaration order, floats via repr."""
    lines = []
    for section in RunConfig.model_fields:
        lines.append(f"[{section}]")
        values = getattr(cfg, section)
        for key in type(values).model_fields:
            lines.append(f"{key} = {_render_value(getattr(values, key))}")
        lines.append("")
    return "\n".join(lines)


def override(cfg: RunConfig, changes: Mapping[str, Any]) -> RunConfig:
    """Validated copy of cfg with dotted-key changes applied, e.g. {"rpe.max_h": 128}."""
    data = cfg.model_dump()
    for dotted, value in changes.items():
        section, _, key = dotted.partition(".")
        if section not in data or not key:
            raise ConfigError("unknown key", key=dotted)
        if key not in data[section]:
            raise ConfigError("unknown key", key=dotted)
        data[section][key] = value
    return from_mapping(data)


def pe_config(cfg: RunConfig, h_test: int = None, w_test: int = None) -> PEConfig:
    h_train = cfg.h_train
    return PEConfig(
        d=cfg.model.hidden_dim // cfg.model.num_heads,
        base=cfg.pe.base,
        max_h=cfg.rpe.max_h,
        max_w=cfg.rpe.max_w,
        strategy=cfg.pe.strategy,
        h_train=h_train,
        w_train=h_train,
        h_test=h_train if h_test is None else h_test,
        w_test=h_train if w_test is None else w_test,
        form=cfg.pe.form,
        variant=cfg.rpe.variant,
        clamp_ratio=cfg.pe.clamp_ratio,
        ntk_dim=cfg.pe.ntk_dim,
    )


def model_config(cfg: RunConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        patch_size=m.patch_size,
        channels=m.channels,
        hidden_dim=m.hidden_dim,
        num_heads=m.num_heads,
        depth=m.depth,
        num_classes=m.num_classes,
        pe=pe_config(cfg),
        dim_per_scalar=cfg.cond.dim_per_scalar,
        use_micro_cond=cfg.cond.micro,
        class_dropout=m.class_dropout,
        mlp_ratio=m.mlp_ratio,
        freq_dim=m.freq_dim,
        timesteps=cfg.diffusion.timesteps,
    )


def diffusion_schedule(cfg: RunConfig) -> DiffusionSchedule:
    d = cfg.diffusion
    return DiffusionSchedule.linear(d.timesteps, d.beta_start, d.beta_end)
