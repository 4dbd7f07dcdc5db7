"""Experiment configuration: flat TOML keys, strict validation, resolved echo.

Every key has a documented default; unknown keys are rejected rather than
ignored so typos cannot silently change an experiment. The fully resolved
configuration is written next to the results for provenance, and feeding it
back reproduces the run.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

from .federation import STRATEGIES, RoundConfig
from .models import ModelSpec


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key."""


@dataclass
class ExperimentConfig:
    strategy: str = "fedcg"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = ""
    dtype: str = "float64"
    workers: int = 1

    # protocol
    rounds: int = 100
    local_epochs: int = 20
    batch_size: int = 16
    server_iters: int = 2000
    server_batch: int = 16
    lr_task: float = 3e-4
    lr_gan: float = 3e-4
    lr_server: float = 3e-4
    weight_decay: float = 1e-4
    gamma_kind: str = "linear"
    mu_prox: float = 0.0
    dp_noise_variance: float = 0.0
    dp_clip: float = math.inf
    diversity_weight: float = 1.0
    gen_loss_mode: str = "non_saturating"
    patience: int = 10
    eval_every: int = 1

    # model
    image_channels: int = 3
    classes: int = 10
    noise_dim: int = 100

    # data
    data_source: str = "synthetic"      # synthetic | path to an FCGD file
    samples_per_class: int = 100
    difficulty: float = 0.5
    clients: int = 4
    scheme: str = "iid"                 # iid | label_skew | by_label_groups
    concentration: float = 0.5
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    max_train_per_client: int = 0       # 0 disables the cap

    # attack defaults (used by the attack subcommand)
    attack_budget: int = 2000
    attack_lr: float = 0.1
    attack_alpha: float = 1.0
    attack_restarts: int = 3
    attack_stats_samples: int = 256

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, batch_size=self.batch_size,
            server_iters=self.server_iters, server_batch=self.server_batch,
            lr_task=self.lr_task, lr_gan=self.lr_gan, lr_server=self.lr_server,
            weight_decay=self.weight_decay, gamma_kind=self.gamma_kind,
            mu_prox=self.mu_prox, dp_noise_variance=self.dp_noise_variance,
            dp_clip=self.dp_clip, diversity_weight=self.diversity_weight,
            gen_loss_mode=self.gen_loss_mode, patience=self.patience,
            eval_every=self.eval_every)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(image_channels=self.image_channels, classes=self.classes,
                         noise_dim=self.noise_dim)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

_POSITIVE_INT = ("rounds", "local_epochs", "batch_size", "server_iters", "server_batch",
                 "patience", "eval_every", "clients", "classes", "noise_dim",
                 "samples_per_class", "attack_budget", "attack_restarts",
                 "attack_stats_samples", "workers")
_POSITIVE_FLOAT = ("lr_task", "lr_gan", "lr_server", "dp_clip", "attack_lr")
_NONNEG_FLOAT = ("weight_decay", "mu_prox", "dp_noise_variance", "diversity_weight",
                 "attack_alpha")


def _coerce_value(key: str, value, target_type):
    if target_type == "int" or target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' expects an integer, got {value!r}")
        return value
    if target_type == "float" or target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects a number, got {value!r}")
        return float(value)
    if target_type == "str" or target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"key '{key}' expects a string, got {value!r}")
        return value
    if key == "seeds":
        if isinstance(value, int) and not isinstance(value, bool):
            return [value]
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            raise ConfigError(f"key 'seeds' expects a non-empty list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"key '{key}' has unsupported type")


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat TOML text into a validated, fully defaulted config."""
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key '{key}'")
        setattr(cfg, key, _coerce_value(key, value, _FIELD_TYPES[key]))
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def validate_config(cfg: ExperimentConfig) -> None:
    for key in _POSITIVE_INT:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"key '{key}' must be >= 1, got {getattr(cfg, key)}")
    for key in _POSITIVE_FLOAT:
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"key '{key}' must be positive, got {getattr(cfg, key)}")
    for key in _NONNEG_FLOAT:
        if getattr(cfg, key) < 0:
            raise ConfigError(f"key '{key}' must be >= 0, got {getattr(cfg, key)}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"key 'strategy' must be one of {STRATEGIES}, got '{cfg.strategy}'")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"key 'dtype' must be float32 or float64, got '{cfg.dtype}'")
    if cfg.gamma_kind not in ("linear", "cosine"):
        raise ConfigError(f"key 'gamma_kind' must be linear or cosine, got '{cfg.gamma_kind}'")
    if cfg.gen_loss_mode not in ("saturating", "non_saturating"):
        raise ConfigError(f"key 'gen_loss_mode' is invalid: '{cfg.gen_loss_mode}'")
    if cfg.scheme not in ("iid", "label_skew", "by_label_groups"):
        raise ConfigError(f"key 'scheme' is invalid: '{cfg.scheme}'")
    if cfg.image_channels not in (1, 3):
        raise ConfigError(f"key 'image_channels' must be 1 or 3, got {cfg.image_channels}")
    if cfg.classes < 2:
        raise ConfigError(f"key 'classes' must be >= 2, got {cfg.classes}")
    if not (0 < cfg.train_fraction < 1):
        raise ConfigError(f"key 'train_fraction' must lie in (0,1), got {cfg.train_fraction}")
    if not (0 <= cfg.val_fraction < 1) or cfg.train_fraction + cfg.val_fraction >= 1:
        raise ConfigError("keys 'train_fraction'+'val_fraction' must leave room for a test split")
    if cfg.concentration <= 0:
        raise ConfigError(f"key 'concentration' must be positive, got {cfg.concentration}")
    if not (0 <= cfg.difficulty <= 1):
        raise ConfigError(f"key 'difficulty' must lie in [0,1], got {cfg.difficulty}")
    if cfg.max_train_per_client < 0:
        raise ConfigError(f"key 'max_train_per_client' must be >= 0, got {cfg.max_train_per_client}")
    if cfg.data_source != "synthetic" and not cfg.data_source.endswith(".fcgd"):
        raise ConfigError("key 'data_source' must be 'synthetic' or a path to a .fcgd file")


def _format_toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_format_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format_toml_value(getattr(cfg, f.name))}"
             for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def default_output_dir() -> str:
    return os.environ.get("FEDCG_OUTPUT_DIR", "runs")
