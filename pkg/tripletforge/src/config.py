from __future__ import annotations

import os
import tomllib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

from tripletforge.src.core import ValidationError
from tripletforge.src.featgen import GanConfig
from tripletforge.src.fsta import FstaConfig
from tripletforge.src.harness import HarnessConfig, SynthSpec
from tripletforge.src.ietrans import TransferConfig
from tripletforge.src.metrics import EvalConfig
from tripletforge.src.soft_transfer import SoftTransferConfig

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(ValidationError):
    """Raised when the run configuration is invalid."""

    def __init__(self, message: str) -> None:
        super().__init__("config", message)


@dataclass(frozen=True)
class PathsConfig:
    annotations: str | None = None
    predictions: str | None = None
    features: str | None = None
    outputs: str | None = None


@dataclass(frozen=True)
class HarnessSettings:
    """Training-loop settings of the synthetic harness (the ``[harness]`` section)."""

    epochs: int = 10
    lr: float = 0.5
    hidden: int = 32
    batch_images: int = 8
    reweight: bool = False
    k: tuple[int, ...] = (5, 10)
    resample_strict: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one CLI run.

    Resolution order: dataclass defaults, then the TOML file, then the
    environment (``TF_SEED``, ``LOG_LEVEL``), then command-line flags.
    """

    paths: PathsConfig = field(default_factory=PathsConfig)
    ietrans: TransferConfig = field(default_factory=TransferConfig)
    soft: SoftTransferConfig = field(default_factory=SoftTransferConfig)
    fsta: FstaConfig = field(default_factory=FstaConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    harness: HarnessSettings = field(default_factory=HarnessSettings)
    # Sections used by synth-exp in place of [ietrans], [soft], [fsta] and [gan];
    # their defaults are sized for the synthetic data.
    harness_ietrans: TransferConfig = field(default_factory=lambda: HarnessConfig().transfer)
    harness_soft: SoftTransferConfig = field(default_factory=lambda: HarnessConfig().soft)
    harness_fsta: FstaConfig = field(default_factory=lambda: HarnessConfig().fsta)
    harness_gan: GanConfig = field(default_factory=lambda: HarnessConfig().gan)
    seed: int = 0
    log_level: str = "INFO"

    def harness_config(self) -> HarnessConfig:
        """Harness training config built from the ``harness_*`` sections."""
        return HarnessConfig(
            **asdict(self.harness),
            transfer=self.harness_ietrans,
            soft=self.harness_soft,
            fsta=self.harness_fsta,
            gan=self.harness_gan,
            seed=self.seed,
        )

    def echo(self) -> dict[str, Any]:
        """JSON-ready view of every setting, for run manifests."""
        return {
            item.name: _plain(getattr(self, item.name)) for item in fields(self)
        }


_SECTIONS = (
    "paths",
    "ietrans",
    "soft",
    "fsta",
    "gan",
    "eval",
    "synth",
    "harness",
    "harness_ietrans",
    "harness_soft",
    "harness_fsta",
    "harness_gan",
)
_TOP_LEVEL = {"seed", "log_level"}
_DEFAULTS = RunConfig()


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {item.name: _plain(getattr(value, item.name)) for item in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple | list):
        return [_plain(v) for v in value]
    return value


def _coerce(value: Any) -> Any:
    """TOML arrays become tuples so frozen configs stay hashable."""
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def env_int(
    env: Mapping[str, str], name: str, default: int, *, minimum: int | None = None
) -> int:
    raw = env.get(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got: {value}")
    return value


def _build_section(name: str, values: Mapping[str, Any]) -> Any:
    default = getattr(_DEFAULTS, name)
    known = {item.name for item in fields(default)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    try:
        return replace(default, **{key: _coerce(value) for key, value in values.items()})
    except TypeError as exc:
        raise ConfigError(f"[{name}] has a value of the wrong type: {exc}") from exc


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with Path(path).open("rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge defaults, an optional TOML file, the environment and flag overrides.

    ``overrides`` keys are ``"section.key"`` or a top-level key such as
    ``"seed"``; None values are ignored.
    """
    values = env if env is not None else os.environ
    data: dict[str, Any] = read_config_file(path) if path is not None else {}

    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    top: dict[str, Any] = {}
    for key, value in data.items():
        if key in _TOP_LEVEL:
            top[key] = value
        elif key in _SECTIONS and isinstance(value, dict):
            sections[key].update(value)
        else:
            raise ConfigError(f"unknown config section or key {key!r}")

    if "TF_SEED" in values:
        top["seed"] = env_int(values, "TF_SEED", 0, minimum=0)
    if "LOG_LEVEL" in values:
        top["log_level"] = values["LOG_LEVEL"]

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            if section not in _TOP_LEVEL:
                raise ConfigError(f"unknown override {dotted!r}")
            top[section] = value
        elif section in _SECTIONS:
            sections[section][key] = value
        else:
            raise ConfigError(f"unknown override {dotted!r}")

    seed = top.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    log_level = str(top.get("log_level", "INFO")).upper()
    if log_level not in LOG_LEVELS:
        raise ConfigError(f"log_level must be one of {', '.join(LOG_LEVELS)}")

    built = {name: _build_section(name, sections[name]) for name in _SECTIONS}
    config = RunConfig(**built, seed=seed, log_level=log_level)
    for name in ("gan", "harness_gan"):
        if "seed" not in sections[name]:
            config = replace(config, **{name: replace(getattr(config, name), seed=seed)})
    return config
