"""Run configuration: defaults <- JSON file <- ``key=value`` overrides.

Unknown keys and type mismatches are errors.  A ``run.json`` written by a
previous run is accepted as a config file and replays that run.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields

from .cra import CalibrationParams
from .synthlab.model import ModelConfig
from .synthlab.train import DataConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _defaults_of(cls, skip=()):
    return {f.name: copy.deepcopy(getattr(cls(), f.name)) for f in fields(cls) if f.name not in skip}


def defaults():
    return {
        "task": "seg",
        "seed": 0,
        "data": _defaults_of(DataConfig),
        "model": _defaults_of(ModelConfig, skip=("task",)),
        "cra": _defaults_of(CalibrationParams),
        "train": _defaults_of(TrainConfig, skip=("seed",)),
        "ablate": {"variants": ["baseline", "A", "B", "C", "D"], "seeds": [0, 1, 2, 3, 4]},
        "sweep": {"group_sizes": [1, 2, 4, 8], "train": True},
        "gradcheck": {"suites": [], "instances": 20},
        "stats": {"compare_lambda2": True},
    }


def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(base, update, path=""):
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            _merge(base[key], value, dotted + ".")
        elif not _type_ok(base[key], value):
            raise ConfigError(
                f"config key {dotted!r} expects {type(base[key]).__name__}, got {type(value).__name__}"
            )
        else:
            base[key] = float(value) if isinstance(base[key], float) else copy.deepcopy(value)


def parse_override(text):
    """``a.b=value`` -> ({"a": {"b": value}}); values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), seed=None):
    cfg = defaults()
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        if "config" in data and "versions" in data:
            data = data["config"]  # replaying a run.json
        _merge(cfg, data)
    for text in overrides:
        _merge(cfg, parse_override(text))
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        build(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def build(cfg):
    """Typed objects for one resolved config: (data, model, cra, train)."""
    data = DataConfig(**cfg["data"])
    model = ModelConfig(task=cfg["task"], **cfg["model"])
    cra = CalibrationParams(**cfg["cra"])
    train = TrainConfig(seed=cfg["seed"], **cfg["train"])
    return data, model, cra, train
