"""Run configuration files.

A config file is JSON with the optional sections ``scene``, ``shift``,
``data``, ``model``, ``train``, ``weights``, ``thresholds`` and ``eval``.
Every field is optional. The resolved form written next to each run wraps every
value as ``{"value": ..., "source": "paper" | "default" | "user"}`` and is
itself a valid config file.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .datagen import DomainShiftSpec, SceneSpec
from .losses import LossWeights
from .nets import EncoderSpec
from .trainer import ConfigError, TrainConfig

# Values stated in the method's implementation details; anything else is a default of ours.
PAPER_VALUES: dict[tuple[str, str], Any] = {
    ("train", "sgd_lr"): 2.5e-4,
    ("train", "sgd_momentum"): 0.9,
    ("train", "weight_decay"): 5e-4,
    ("train", "adam_lr"): 1e-4,
    ("train", "adam_beta1"): 0.9,
    ("train", "adam_beta2"): 0.99,
    ("weights", "lambda_s"): 0.0003,
    ("weights", "lambda_t"): 0.0003,
    ("model", "disc_fine_channels"): [64, 128, 256, 512, 1],
    ("model", "disc_coarse_hidden"): [256, 512],
}

_TRAIN_SCALARS = ("iterations", "crop_height", "crop_width", "sgd_lr", "sgd_momentum", "weight_decay",
                  "adam_lr", "adam_beta1", "adam_beta2", "lr_power", "seed", "variant", "update_order",
                  "checkpoint_every", "deterministic", "dtype", "device")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_val: int = 100
    workers: int = 1


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    split: str = "val"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self) -> dict[str, dict]:
        t = self.train
        return {
            "scene": asdict(self.scene),
            "shift": asdict(self.shift),
            "data": asdict(self.data),
            "model": {
                "encoder": asdict(t.encoder),
                "disc_fine_channels": list(t.disc_fine_channels),
                "disc_coarse_hidden": list(t.disc_coarse_hidden),
            },
            "train": {k: getattr(t, k) for k in _TRAIN_SCALARS},
            "weights": asdict(t.weights),
            "thresholds": {"th_w": t.th_w, "th_n": t.th_n},
            "eval": {"seeds": list(self.eval.seeds), "split": self.eval.split},
        }


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _unwrap(v):
    if isinstance(v, dict) and set(v) == {"value", "source"}:
        return v["value"]
    return v


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def from_dict(raw: dict) -> tuple[RunConfig, set[tuple[str, str]]]:
    """Build a RunConfig; also returns the (section, key) pairs the file set explicitly."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    base = RunConfig()
    defaults = base.sections()
    _check_keys("top level", raw, defaults)
    merged = {k: dict(v) for k, v in defaults.items()}
    user: set[tuple[str, str]] = set()
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section [{section}] must be a mapping")
        _check_keys(section, values, defaults[section])
        for key, value in values.items():
            value = _unwrap(value)
            if isinstance(value, dict) and isinstance(defaults[section][key], dict):
                _check_keys(f"{section}.{key}", value, defaults[section][key])
                value = {**defaults[section][key], **{k: _unwrap(v) for k, v in value.items()}}
            merged[section][key] = value
            if isinstance(values[key], dict) and set(values[key]) == {"value", "source"}:
                if values[key]["source"] == "user":
                    user.add((section, key))
            elif merged[section][key] != defaults[section][key]:
                user.add((section, key))
    try:
        m = merged
        train = TrainConfig(
            **m["train"],
            weights=LossWeights(**m["weights"]),
            th_w=m["thresholds"]["th_w"],
            th_n=m["thresholds"]["th_n"],
            encoder=EncoderSpec(**m["model"]["encoder"]),
            disc_fine_channels=tuple(m["model"]["disc_fine_channels"]),
            disc_coarse_hidden=tuple(m["model"]["disc_coarse_hidden"]),
        )
        cfg = RunConfig(
            scene=SceneSpec(**m["scene"]),
            shift=DomainShiftSpec(**m["shift"]),
            data=DataConfig(**m["data"]),
            train=train,
            eval=EvalConfig(**m["eval"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfg, user


def load(path: Optional[Path | str]) -> tuple[RunConfig, set[tuple[str, str]]]:
    if path is None:
        return RunConfig(), set()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(raw)


def resolved(cfg: RunConfig, user: set[tuple[str, str]] = frozenset()) -> dict:
    """Every field materialized with a provenance marker."""
    out = {}
    for section, values in cfg.sections().items():
        out[section] = {}
        for key, value in values.items():
            value = _jsonable(value)
            if (section, key) in user:
                source = "user"
            elif PAPER_VALUES.get((section, key)) == value:
                source = "paper"
            else:
                source = "default"
            out[section][key] = {"value": value, "source": source}
    return out


def with_overrides(cfg: RunConfig, user: set, **train_overrides) -> tuple[RunConfig, set]:
    """Apply CLI flags (``seed``, ``variant``, ``iterations``, ``device``) to the train section."""
    given = {k: v for k, v in train_overrides.items() if v is not None}
    if not given:
        return cfg, user
    try:
        train = replace(cfg.train, **given)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return replace(cfg, train=train), set(user) | {("train", k) for k in given}
