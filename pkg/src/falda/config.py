"""Run configuration: a flat key=value file plus command-line overrides.

Every field is validated before any compute happens; unknown keys are
rejected outright so typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

CONFIG_VERSION = 1


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    data: str = ""
    out_dir: str = "falda-out"
    lookback: int = 96
    horizon: int = 192
    stride: int = 1
    split_train: float = 0.7
    split_val: float = 0.1
    k1: int = 2
    k2: int = 4
    backbone: str = "linear"
    per_channel: bool = False
    mlp_hidden: int = 256
    ns_hidden: int = 64
    hidden: int = 128
    layers: int = 2
    kernel: int = 25
    steps: int = 1000
    finetune_step: int = 100
    ddim_steps: int = 10
    eta: float = 1.0
    pretrain_epochs: int = 2
    alternate_period: int = 10
    epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-4
    samples: int = 100
    seed: int = 0
    qice_bins: int = 10
    interval_lo: float = 2.5
    interval_hi: float = 97.5

    def validate(self):
        if self.lookback < 2 or self.horizon < 2:
            raise ConfigError("lookback and horizon must be >= 2")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not (0.0 < self.split_train < 1.0 and 0.0 < self.split_val < 1.0
                and self.split_train + self.split_val < 1.0):
            raise ConfigError("split ratios must be positive and leave room for a test split")
        if self.k1 < 0 or self.k2 < 0:
            raise ConfigError("k1 and k2 must be >= 0")
        n_bins = min(self.lookback, self.horizon) // 2 + 1
        if self.k1 + self.k2 > n_bins:
            raise ConfigError(
                f"k1 + k2 = {self.k1 + self.k2} exceeds the {n_bins} bins of the shorter window")
        if self.backbone not in ("linear", "mlp"):
            raise ConfigError(f"backbone must be 'linear' or 'mlp', got {self.backbone!r}")
        if min(self.mlp_hidden, self.ns_hidden, self.layers) < 1:
            raise ConfigError("network sizes must be >= 1")
        if self.hidden < 2 or self.hidden % 2 != 0:
            raise ConfigError("hidden must be even and >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd and >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 1 <= self.finetune_step <= self.steps:
            raise ConfigError(f"finetune_step must lie in [1, {self.steps}]")
        if self.ddim_steps < 1:
            raise ConfigError("ddim_steps must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.alternate_period < 1:
            raise ConfigError("alternate_period must be >= 1")
        if min(self.epochs, self.patience, self.batch_size, self.samples) < 1:
            raise ConfigError("epochs, patience, batch_size and samples must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.qice_bins < 1:
            raise ConfigError("qice_bins must be >= 1")
        if not 0.0 <= self.interval_lo < self.interval_hi <= 100.0:
            raise ConfigError("interval percentiles must satisfy 0 <= lo < hi <= 100")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, value):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "bool" or kind is bool:
            return _parse_bool(value)
        if kind == "int" or kind is int:
            return int(str(value).strip())
        if kind == "float" or kind is float:
            return float(str(value).strip())
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r}") from exc


def parse_config_file(path):
    """Read a flat key = value file; '#' starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    return values


def build_config(file_values=None, overrides=None):
    """Merge file values and overrides into a validated RunConfig.

    ``format_version`` is accepted (and checked) in files; any other key
    that is not a RunConfig field is rejected.
    """
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key == "format_version":
                if str(value).strip() != str(CONFIG_VERSION):
                    raise ConfigError(f"unsupported config format_version {value!r}")
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    return RunConfig(**merged).validate()


def write_config(config, path):
    with open(path, "w") as fh:
        fh.write(f"format_version = {CONFIG_VERSION}\n")
        for f in fields(RunConfig):
            value = getattr(config, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name} = {value}\n")
