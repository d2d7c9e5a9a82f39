"""
Experiment configuration.

Config files are plain ``key = value`` lines; ``#`` starts a comment and list
values are comma separated::

    dataset = synthetic
    rho = 10
    seeds = 0, 1, 2, 3, 4
    backbone_channels = 16, 32, 64

Presets ``paper`` and ``desk`` provide defaults; file values override the
preset and explicit overrides (CLI flags) override the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

DATASETS = ("synthetic", "mnist", "fashion", "cifar10")
MODES = ("ours", "naive_nn", "nn_with_ics", "recon_baseline")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    normal_class: int = 0
    rho: float = 10.0
    iterations: int = 2000
    ae_iterations: int = 2000
    batch: int = 64
    lr: float = 1e-4
    ae_lr: float = 1e-3
    l2_decay: float = 1e-6
    latent_dim: int = 64
    code_dim: int = 32
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    ae_channels: tuple[int, ...] = (16, 32, 64)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mode: str = "ours"
    out: str = "runs"
    data_seed: int = 0
    test_normal: int = 1000
    test_abnormal: int = 9000
    synthetic_n_train: int = 2000
    synthetic_test_normal: int = 200
    synthetic_test_abnormal: int = 1800
    synthetic_image_size: int = 28
    ssim_window: int = 7

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.rho < 100:
            raise ConfigError(f"rho must lie strictly between 0 and 100, got {self.rho}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")
        counts = ("iterations", "ae_iterations", "latent_dim", "code_dim", "test_normal", "test_abnormal",
                  "synthetic_n_train", "synthetic_test_normal", "synthetic_test_abnormal")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.lr <= 0 or self.ae_lr <= 0 or self.l2_decay < 0:
            raise ConfigError("learning rates must be > 0 and l2_decay >= 0")
        if not 0 <= self.normal_class <= 9:
            raise ConfigError(f"normal_class must be in 0..9, got {self.normal_class}")
        if self.dataset != "synthetic" and not self.data_dir:
            raise ConfigError(f"dataset {self.dataset!r} needs data_dir")
        return self

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self, *exclude: str) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


PRESETS: dict[str, dict[str, Any]] = {
    # reduced backbone and budgets that fit a single CPU core
    "desk": {},
    # full-scale setup: 10000 iterations, wider backbone
    "paper": {
        "iterations": 10000,
        "ae_iterations": 10000,
        "backbone_channels": (32, 64, 128),
        "ae_channels": (32, 64, 128),
        "test_normal": 1000,
        "test_abnormal": 9000,
    },
}


_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(name: str, raw: Any) -> Any:
    if name not in _HINTS:
        raise ConfigError(f"unknown config key {name!r}")
    hint = _HINTS[name]
    try:
        if typing.get_origin(hint) is tuple:
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).replace(",", " ").split()]
            return tuple(int(s) for s in items)
        if hint is int:
            value = float(raw) if isinstance(raw, (str, float)) else raw
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(raw)
            return int(value)
        if hint is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name!r}: cannot interpret {raw!r} as {hint}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def make_config(preset: str = "desk", path: str | Path | None = None,
                overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        values.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value)
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()
