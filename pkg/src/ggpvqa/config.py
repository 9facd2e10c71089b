"""Experiment configuration with flat dotted keys.

Config files are either ``key = value`` lines (``#`` starts a comment) or JSON,
nested or flat.  Every key has a default and unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ggp import PerturbationConfig
from .nn import ModelConfig


@dataclass
class PhaseConfig:
    epochs: int
    batch: int
    lr: float
    warmup: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")


@dataclass
class DataConfig:
    n_pretrain: int = 2000
    n_train: int = 256
    n_val: int = 256


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02


@dataclass
class ObjectiveConfig:
    temperature: float = 0.07
    queue_size: int = 256
    momentum: float = 0.995
    mask_rate: float = 0.15
    w_itc: float = 1.0
    w_itm: float = 1.0
    w_mlm: float = 1.0

    @property
    def weights(self) -> dict:
        return {"itc": self.w_itc, "itm": self.w_itm, "mlm": self.w_mlm}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(30, 32, 3e-4, 0.05))
    finetune: PhaseConfig = field(default_factory=lambda: PhaseConfig(40, 32, 3e-5, 0.05))
    ggp: PerturbationConfig = field(default_factory=PerturbationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    # ---- flat view
    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for sub in dataclasses.fields(val):
                    out[f"{f.name}.{sub.name}"] = getattr(val, sub.name)
            else:
                out[f.name] = val
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        defaults = cls().to_flat()
        unknown = sorted(set(flat) - set(defaults))
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        merged = {k: _coerce(k, flat[k], defaults[k]) if k in flat else v for k, v in defaults.items()}
        kwargs = {}
        for f in dataclasses.fields(cls):
            sub_default = getattr(cls(), f.name)
            if dataclasses.is_dataclass(sub_default):
                sub = {s.name: merged[f"{f.name}.{s.name}"] for s in dataclasses.fields(sub_default)}
                kwargs[f.name] = type(sub_default)(**sub)
            else:
                kwargs[f.name] = merged[f.name]
        return cls(**kwargs)

    def replace(self, **flat_updates) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"ggp.delta": 0.0})``."""
        flat = self.to_flat()
        flat.update(flat_updates)
        return ExperimentConfig.from_flat(flat)

    # ---- serialization
    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_flat().items())

    def to_json(self) -> dict:
        return self.to_flat()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")
        else:
            path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        stripped = text.strip()
        if stripped.startswith("{"):
            return cls.from_flat(_flatten(json.loads(stripped)))
        flat = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            flat[k] = v
        return cls.from_flat(flat)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("true", "1", "yes", "on"):
            return True
        if s in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    return str(value)
