"""Run configuration: defaults, INI-style files, environment and flag overrides.

Precedence, lowest to highest: dataclass defaults, config file, environment
variables named ``GAZEDETR_<SECTION>_<KEY>``, then explicit ``section.key``
overrides (the CLI flags).
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .data import AugmentConfig, SynthConfig
from .matching import LossWeights, MatchConfig
from .model import ModelConfig

ENV_PREFIX = "GAZEDETR_"

# Model fields implied by the matching strategy rather than set directly.
DERIVED_MODEL_FIELDS = ("gaze_location", "heatmap_output", "heatmap_size")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    lr_backbone: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    lr_drop_at: float = 0.8
    lr_drop_factor: float = 0.1
    fine_tune: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.lr_backbone < 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.lr_drop_at <= 1.0:
            raise ValueError("lr_drop_at must lie in (0, 1]")

    def rates(self):
        """``(transformer, backbone)`` rates; fine-tuning uses the low preset."""
        if self.fine_tune:
            return 1e-5, 1e-6
        return self.lr, self.lr_backbone


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 10
    train_dir: str = ""
    eval_dir: str = ""
    synth_count: int = 2000
    eval_count: int = 300
    eval_seed: int = 1_000_003
    augment: bool = False
    batch_scale: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.synth_count < 1 or self.eval_count < 1:
            raise ValueError("synth_count and eval_count must be >= 1")


SECTIONS = {
    "model": ModelConfig,
    "match": MatchConfig,
    "loss": LossWeights,
    "optim": OptimConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "augment": AugmentConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.model.gaze_location = self.match.predict_location
        self.model.heatmap_output = self.match.predict_heatmap
        self.model.heatmap_size = self.match.heatmap_size
        self.model.__post_init__()

    def to_dict(self):
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self):
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                if name == "model" and k in DERIVED_MODEL_FIELDS:
                    continue
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _section_dict(obj):
    return obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)


def _format(v):
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def section_fields(section):
    cls = SECTIONS[section]
    return {f.name: f for f in dataclasses.fields(cls)
            if not (section == "model" and f.name in DERIVED_MODEL_FIELDS)}


def _parse_value(section, key, raw, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def _defaults(section):
    return SECTIONS[section]()


def build_config(path=None, overrides=None, environ=None):
    """Resolve a :class:`RunConfig` from file, environment and overrides.

    ``overrides`` maps ``"section.key"`` to a string (or already-typed) value.
    Unknown sections or keys raise :class:`ConfigError`.
    """
    environ = os.environ if environ is None else environ
    values = {s: {} for s in SECTIONS}

    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            known = section_fields(section)
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key} in {path}")
                values[section][key] = raw

    for section in SECTIONS:
        for key in section_fields(section):
            env = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if env in environ:
                values[section][key] = environ[env]

    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in section_fields(section):
            raise ConfigError(f"unknown config key {dotted!r}")
        values[section][key] = raw

    built = {}
    for section, cls in SECTIONS.items():
        defaults = _defaults(section)
        kwargs = {}
        for key, raw in values[section].items():
            default = getattr(defaults, key)
            kwargs[key] = _parse_value(section, key, raw, default) if isinstance(raw, str) else raw
        try:
            built[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    try:
        return RunConfig(**built)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(d):
    """Rebuild a :class:`RunConfig` from :meth:`RunConfig.to_dict` output."""
    built = {}
    for section, cls in SECTIONS.items():
        kwargs = {k: v for k, v in d.get(section, {}).items()
                  if not (section == "model" and k in DERIVED_MODEL_FIELDS)}
        built[section] = cls(**kwargs)
    return RunConfig(**built)


def diff_model_config(a, b):
    """Names of model fields that differ between two model-section dicts."""
    keys = sorted(set(a) | set(b))
    return [k for k in keys if a.get(k) != b.get(k) and k != "seed"]
