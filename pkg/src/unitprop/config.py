"""Run configuration shared by every subcommand.

A config file is a JSON object with the top-level keys ``seed`` and
``threads`` plus the sections below. Every key has a command-line flag of
the same name (underscores become dashes); flags override file values.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional

from unitprop.metrics import DEFAULT_AR_GRID, DEFAULT_TIOU_GRID
from unitprop.model import TrainConfig
from unitprop.proposer import DEFAULT_WINDOW_FRAMES
from unitprop.sampling import PyramidConfig
from unitprop.synth import SynthConfig, SynthError


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=("seed",)) -> Dict[str, Any]:
    inst = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(inst, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


TOP_DEFAULTS: Dict[str, Any] = {"seed": 0, "threads": 1}

SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "pyramid": _dataclass_defaults(PyramidConfig),
    "train": _dataclass_defaults(TrainConfig),
    "synth": _dataclass_defaults(SynthConfig),
    "propose": {"nms_threshold": 0.5},
    "baseline": {"window_frames": list(DEFAULT_WINDOW_FRAMES), "overlap": 0.75, "count": None},
    "eval": {
        "ar_grid": list(DEFAULT_AR_GRID),
        "tiou_grid": list(DEFAULT_TIOU_GRID),
        "f_values": [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        "n_values": [1, 5, 10, 20, 50, 100, 200, 500, 1000],
        "an_ratios": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
        "recall_frequency": 1.0,
        "map_thresholds": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
    },
    "io": {"data": None, "out": None, "checkpoint": None, "proposals": None, "annotations": None},
}

# Where each default comes from: the published training recipe, the
# synthetic benchmark's design, or a local convention of this package.
PUBLISHED = {
    "pyramid.scales", "pyramid.n_ctx", "train.lr", "train.batch_size", "train.bg_ratio",
    "train.lam", "train.hidden", "baseline.window_frames", "baseline.overlap",
    "synth.unit_frames",
}


def provenance(section: str, key: str) -> str:
    name = f"{section}.{key}"
    if name in PUBLISHED:
        return "published recipe"
    if section == "synth":
        return "synthetic benchmark design"
    return "local convention"


def _check_value(section: str, key: str, value, default):
    where = f"{section}.{key}" if section else key
    if default is None:
        if section == "io":
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where} must be a path string")
            return value
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{where} must be an integer or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where} must be a non-empty list")
        want_int = all(isinstance(d, int) for d in default)
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (want_int and not isinstance(v, int)):
                raise ConfigError(f"{where} must hold {'integers' if want_int else 'numbers'}")
        return list(value)
    raise ConfigError(f"unsupported default type for {where}")


class RunConfig:
    """Effective configuration: defaults, then a file, then flag overrides."""

    def __init__(self):
        self.top = dict(TOP_DEFAULTS)
        self.sections = copy.deepcopy(SECTION_DEFAULTS)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg.update(doc)
        return cfg

    def update(self, doc: dict) -> None:
        for key, value in doc.items():
            if key in TOP_DEFAULTS:
                self.set(None, key, value)
            elif key in SECTION_DEFAULTS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                for k, v in value.items():
                    self.set(key, k, v)
            else:
                raise ConfigError(f"unknown config key {key!r}")

    def set(self, section: Optional[str], key: str, value) -> None:
        if section is None:
            if key not in TOP_DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.top[key] = _check_value("", key, value, TOP_DEFAULTS[key])
            return
        defaults = SECTION_DEFAULTS[section]
        if key not in defaults:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.sections[section][key] = _check_value(section, key, value, defaults[key])

    def get(self, section: str, key: str):
        return self.sections[section][key]

    @property
    def seed(self) -> int:
        return self.top["seed"]

    @property
    def threads(self) -> int:
        return self.top["threads"]

    def to_dict(self) -> dict:
        out = dict(self.top)
        out.update(copy.deepcopy(self.sections))
        return out

    def echo(self, command: str) -> str:
        return json.dumps({"command": command, "config": self.to_dict()}, indent=1, sort_keys=True) + "\n"

    # component configs -----------------------------------------------

    def pyramid_config(self) -> PyramidConfig:
        try:
            return PyramidConfig(**self.sections["pyramid"])
        except ValueError as exc:
            raise ConfigError(f"pyramid: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, **self.sections["train"])
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(seed=self.seed, **self.sections["synth"])
        except (SynthError, TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None
