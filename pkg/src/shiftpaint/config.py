"""Run configuration: ``key = value`` files plus command-line overrides.

Unknown keys are hard errors so a typo in an experiment file cannot silently
fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .networks import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything one training/evaluation run needs."""

    # network
    input_size: int = 32
    depth: int = 5
    base_channels: int = 8
    shift_layer: int = 2
    shift_mode: str = "nearest"
    slice_zero: str = "none"
    threshold_T: float = 5.0 / 16.0
    dtype: str = "float32"
    disc_base_channels: int = 8
    # losses
    lambda_g: float = 0.01
    lambda_adv: float = 0.002
    sum_reduction: bool = False
    saturating: bool = False
    # training
    epochs: int = 30
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    mask_kind: str = "central"
    seed: int = 0
    crop_size: int = 32
    resize_min: int = 32
    fill: float = 0.0
    # io
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def generator_config(self):
        return GeneratorConfig(input_size=self.input_size, depth=self.depth,
                               base_channels=self.base_channels,
                               shift_layer=self.shift_layer,
                               shift_mode=self.shift_mode,
                               slice_zero=self.slice_zero,
                               threshold=self.threshold_T,
                               dtype=self.dtype).validate()

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           weights=LossWeights(self.lambda_g, self.lambda_adv),
                           mask_kind=self.mask_kind, seed=self.seed,
                           crop_size=self.crop_size, resize_min=self.resize_min,
                           fill=self.fill, sum_reduction=self.sum_reduction,
                           saturating=self.saturating).validate()


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def _convert(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            # accept fractions like 5/16 for the threshold sweep
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        if kind == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_run_config(path=None, overrides=None):
    """Config file (optional) merged with explicit overrides, validated."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values.update(parse_config_text(text, source=str(path)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = _convert(key, str(val)) if isinstance(val, str) else val
    cfg = RunConfig(**values)
    cfg.generator_config()
    cfg.train_config()
    return cfg


def dump_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
