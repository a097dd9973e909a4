"""Experiment configuration: presets, flat key-value files, validation.

The config file format is one ``key = value`` pair per line, ``#`` starts a
comment, and ablation switches use dotted keys (``ablation.recon_mode``).
A ``preset`` key may appear in the file to pick the defaults it layers over.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

PRESETS = ("face", "animal", "toy")

DISCRIMINATOR_HEADS = ("multitask", "acgan")
CONDITIONINGS = ("adain", "concat")
RECON_MODES = ("style", "latent", "none")


class ConfigError(ValueError):
    """Raised for unknown presets, unreadable files and invalid values."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass(frozen=True)
class Ablation:
    discriminator_head: str = "multitask"
    conditioning: str = "adain"
    recon_mode: str = "style"
    use_ds: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    image_size: int = 256
    num_domains: int = 2
    latent_dim: int = 16
    style_dim: int = 64
    hidden_dim: int = 512
    base_channels: int = 64
    max_channels: int = 512
    num_down_blocks: int = 4
    lambda_sty: float = 1.0
    lambda_ds: float = 1.0
    lambda_cyc: float = 1.0
    r1_gamma: float = 1.0
    batch_size: int = 8
    total_iters: int = 100_000
    ds_decay_iters: int = 100_000
    lr_gde: float = 1e-4
    lr_f: float = 1e-6
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    ema_decay: float = 0.999
    seed: int = 777
    ablation: Ablation = field(default_factory=Ablation)

    @property
    def sample_every(self) -> int:
        return min(5000, max(1, self.total_iters // 10))


def default_config(preset: str = "face") -> ExperimentConfig:
    if preset == "face":
        return ExperimentConfig(num_domains=2, lambda_ds=1.0)
    if preset == "animal":
        return ExperimentConfig(num_domains=3, lambda_ds=2.0)
    if preset == "toy":
        return ExperimentConfig(
            image_size=32,
            num_domains=3,
            base_channels=16,
            max_channels=64,
            batch_size=4,
            total_iters=500,
            ds_decay_iters=500,
            ema_decay=0.99,
        )
    raise ConfigError(f"unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Return every violated invariant as ``"key: reason"``; empty means ok."""
    problems = []

    def need(ok: bool, key: str, reason: str) -> None:
        if not ok:
            problems.append(f"{key}: {reason}")

    for key in ("latent_dim", "style_dim", "hidden_dim", "base_channels", "max_channels"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.num_domains >= 2, "num_domains", "need at least 2 domains")
    need(cfg.num_down_blocks >= 1, "num_down_blocks", "must be >= 1")
    factor = 2 ** max(cfg.num_down_blocks, 0)
    need(
        cfg.image_size > 0 and cfg.image_size % factor == 0,
        "image_size",
        f"{cfg.image_size} is not a positive multiple of {factor}",
    )
    # instance normalization at the bottleneck needs at least 2x2 positions
    need(cfg.image_size >= 2 * factor, "image_size", f"must be at least {2 * factor}")
    for key in ("lambda_sty", "lambda_ds", "lambda_cyc", "r1_gamma", "lr_gde", "lr_f"):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("adam_beta1", "adam_beta2"):
        need(0 <= getattr(cfg, key) < 1, key, "must lie in [0, 1)")
    need(0 < cfg.ema_decay < 1, "ema_decay", "must lie in (0, 1)")
    for key in ("batch_size", "total_iters", "ds_decay_iters"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.ds_decay_iters <= cfg.total_iters, "ds_decay_iters", "must not exceed total_iters")

    ab = cfg.ablation
    need(ab.discriminator_head in DISCRIMINATOR_HEADS, "ablation.discriminator_head",
         f"expected one of {DISCRIMINATOR_HEADS}")
    need(ab.conditioning in CONDITIONINGS, "ablation.conditioning", f"expected one of {CONDITIONINGS}")
    need(ab.recon_mode in RECON_MODES, "ablation.recon_mode", f"expected one of {RECON_MODES}")
    return problems


def check_config(cfg: ExperimentConfig) -> ExperimentConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems), problems)
    return cfg


# -- flat key/value serialization -------------------------------------------

def _flat_fields() -> dict[str, type]:
    out: dict[str, type] = {}
    for f in fields(ExperimentConfig):
        if f.name == "ablation":
            for af in fields(Ablation):
                out[f"ablation.{af.name}"] = type(getattr(Ablation(), af.name))
        else:
            out[f.name] = type(getattr(ExperimentConfig(), f.name))
    return out


CONFIG_KEYS = _flat_fields()


def _coerce(key: str, raw: Any) -> Any:
    kind = CONFIG_KEYS[key]
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as a boolean", [key])
    try:
        if kind is int:
            number = float(raw)
            if not number.is_integer():
                raise ValueError
            return int(number)
        if kind is float:
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}", [key]) from None
    return str(raw).strip()


def apply_overrides(cfg: ExperimentConfig, values: Mapping[str, Any]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    abl: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key", [key])
        value = _coerce(key, raw)
        if key.startswith("ablation."):
            abl[key.split(".", 1)[1]] = value
        else:
            top[key] = value
    if abl:
        top["ablation"] = replace(cfg.ablation, **abl)
    return replace(cfg, **top)


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def load_config(
    path: str | Path,
    overrides: Mapping[str, Any] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    """Layer file values over a preset, then ``overrides`` over the file.

    The preset comes from ``preset`` if given, else the file's ``preset`` key,
    else ``"face"``.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = parse_config_text(text)
    file_preset = values.pop("preset", None)
    cfg = default_config(preset or file_preset or "face")
    cfg = apply_overrides(cfg, values)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return check_config(cfg)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out = {}
    for f in fields(cfg):
        if f.name == "ablation":
            for key, value in dataclasses.asdict(cfg.ablation).items():
                out[f"ablation.{key}"] = value
        else:
            out[f.name] = getattr(cfg, f.name)
    return out


def config_from_dict(values: Mapping[str, Any]) -> ExperimentConfig:
    return check_config(apply_overrides(ExperimentConfig(), values))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = ["# experiment config"]
    for key, value in config_to_dict(cfg).items():
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
