"""Plain-text ``key = value`` experiment configuration.

One file drives the whole pipeline. Precedence, lowest to highest: built-in
defaults, the config file, the ``HIERTAIL_SEED`` environment variable (seed
only), command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV = "HIERTAIL_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _opt_str(text: str) -> str | None:
    text = text.strip()
    return text or None


@dataclass
class ExperimentConfig:
    # paths
    data: str | None = None
    data_format: str | None = None
    loc2cat: str | None = None
    cat2act: str | None = None
    act2need: str | None = None
    output_dir: str = "runs/default"
    # preprocessing
    min_visits: int = 15
    min_checkins: int = 100
    # training
    epochs: int = 15
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 42
    loss: str = "ahl"
    ablate: str | None = None
    tau: float = 1.0
    dim: int = 32
    level_weights: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    # evaluation
    ks: tuple[int, ...] = (1, 5, 10, 20)
    threads: int = 1
    # synthetic corpus
    n_users: int = 500
    n_locations: int = 2000
    n_categories: int = 300
    n_activities: int = 10
    n_needs: int = 3
    zipf_exponent: float = 1.1
    checkins_min: int = 120
    checkins_max: int = 240
    days: int = 90
    need_bias: float = 0.7

    def validate(self) -> None:
        if self.loss not in ("ahl", "ce"):
            raise ConfigError(f"loss must be 'ahl' or 'ce', got {self.loss!r}")
        if self.ablate is not None and self.ablate not in (
            "no_exploitation", "no_exploration", "no_gumbel", "no_adaptive"
        ):
            raise ConfigError(f"unknown ablation {self.ablate!r}")
        if self.ablate is not None and self.loss == "ce":
            raise ConfigError("ablations apply to the ahl loss only")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.dim < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and dim >= 1 are required")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be positive integers")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if min(self.level_weights) <= 0:
            raise ConfigError("level_weights must be positive")

    @property
    def loss_mode(self) -> str:
        return self.ablate or self.loss

    def dump(self) -> str:
        lines = ["# fully resolved configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif value is None:
                value = ""
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "data": _opt_str, "data_format": _opt_str, "loc2cat": _opt_str, "cat2act": _opt_str,
    "act2need": _opt_str, "output_dir": str.strip, "ablate": _opt_str, "loss": str.strip,
    "ks": _ints, "level_weights": _floats,
}


def _parse_value(key: str, text: str):
    if key in _PARSERS:
        return _PARSERS[key](text)
    default = getattr(ExperimentConfig, key)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def resolve_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Merge defaults, an optional config file, ``HIERTAIL_SEED`` and flag overrides."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    if environ.get(SEED_ENV):
        try:
            values["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg
