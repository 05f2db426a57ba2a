"""Experiment configuration: a versioned JSON document with strict keys."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any

from .data import CANONICAL_ORDER, CONDITION_PREVALENCE, MORTALITY_PREVALENCE, GeneratorConfig
from .errors import ConfigError

SCHEMA_VERSION = 1
TASKS = ("mortality", "conditions")
TASK_MODALITIES = {
    "mortality": ("EHR", "CXR", "RR"),
    "conditions": CANONICAL_ORDER,
}

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "task": "conditions",
    "modalities": None,
    "data": {"synth": {}},
    "encoder_dim": 16,
    "d_proj": 64,
    "theta": 0.75,
    "patching": "confidence",
    "theta_entropy": None,
    "ablation": 0,
    "lr_search": {"lo": 1e-5, "hi": 1e-3, "sweeps": 10},
    "seed": 0,
    "split": [0.70, 0.10, 0.20],
    "training": {"max_epochs": 100, "patience": 15, "batch_size": 16, "confidence_epochs": 100},
    "calibration": {"epochs": 5, "lr": 0.05, "batch_size": 64, "ece_bins": 15},
    "loss": {"low_target": "low"},
    "joint": {"per_class_heads": False},
    "metrics": {"replicates": 1000, "seed": 0},
    "out_dir": None,
}

_NESTED = ("lr_search", "training", "calibration", "loss", "joint", "metrics")


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{path}{k}'")
        if k in _NESTED and path == "":
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{k}' must be an object")
            out[k] = _merge(base[k], v, f"{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        self.validate()

    # -- accessors ---------------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def modalities(self) -> tuple[str, ...]:
        mods = self.raw["modalities"]
        return tuple(mods) if mods else TASK_MODALITIES[self.task]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def generator(self) -> GeneratorConfig:
        synth = dict(self.raw["data"].get("synth") or {})
        synth.setdefault("modalities", list(self.modalities))
        if self.task == "mortality":
            synth.setdefault("n_classes", 1)
            synth.setdefault("prevalence", MORTALITY_PREVALENCE)
        else:
            synth.setdefault("n_classes", len(CONDITION_PREVALENCE))
            if "prevalence" not in synth:
                synth["prevalence"] = (list(CONDITION_PREVALENCE) if synth["n_classes"] == len(CONDITION_PREVALENCE)
                                       else MORTALITY_PREVALENCE)
        synth.setdefault("seed", self.seed)
        gen = GeneratorConfig.from_dict(synth)
        if tuple(gen.modalities) != self.modalities:
            raise ConfigError("data.synth.modalities must match the experiment modality set")
        if self.task == "mortality" and gen.n_classes != 1:
            raise ConfigError("data.synth.n_classes must be 1 for the mortality task")
        return gen

    def data_path(self):
        return self.raw["data"].get("path")

    # -- validation --------------------------------------------------------

    def validate(self):
        r = self.raw
        if r["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {r['schema_version']!r}")
        if r["task"] not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {r['task']!r}")
        mods = self.modalities
        if len(set(mods)) != len(mods) or not mods:
            raise ConfigError("modalities: must be a non-empty list of distinct names")
        if r["task"] == "mortality" and "DN" in mods:
            raise ConfigError("modalities: DN is excluded from the mortality task (label leakage)")
        data = r["data"]
        if not isinstance(data, dict) or set(data) - {"synth", "path"} or len(data) != 1:
            raise ConfigError("data: must contain exactly one of 'synth' or 'path'")
        if "synth" in data:
            self.generator()
        if not 0.5 < float(r["theta"]) <= 1.0:
            raise ConfigError("theta: must lie in (0.5, 1]")
        if r["patching"] not in ("confidence", "entropy"):
            raise ConfigError("patching: must be 'confidence' or 'entropy'")
        if r["theta_entropy"] is not None and not 0.0 <= float(r["theta_entropy"]) <= 1.0:
            raise ConfigError("theta_entropy: must lie in [0, 1]")
        if r["ablation"] not in (0, 1, 2, 3, 4):
            raise ConfigError("ablation: must be an integer 0..4")
        lr = r["lr_search"]
        if not (lr["lo"] > 0 and lr["hi"] > 0):
            raise ConfigError("lr_search: bounds must be positive")
        if not lr["lo"] < lr["hi"]:
            raise ConfigError("lr_search: lo must be below hi")
        if int(lr["sweeps"]) < 1:
            raise ConfigError("lr_search.sweeps: must be >= 1")
        if len(r["split"]) != 3 or abs(sum(r["split"]) - 1.0) > 1e-9 or min(r["split"]) <= 0:
            raise ConfigError("split: three positive ratios summing to 1")
        for k in ("max_epochs", "patience", "batch_size", "confidence_epochs"):
            if int(r["training"][k]) < 1:
                raise ConfigError(f"training.{k}: must be >= 1")
        if int(r["calibration"]["epochs"]) < 0 or int(r["calibration"]["ece_bins"]) < 1:
            raise ConfigError("calibration: epochs >= 0 and ece_bins >= 1 required")
        if r["loss"]["low_target"] not in ("low", "late"):
            raise ConfigError("loss.low_target: must be 'low' or 'late'")
        if int(r["metrics"]["replicates"]) < 1:
            raise ConfigError("metrics.replicates: must be >= 1")
        if int(r["encoder_dim"]) < 1 or int(r["d_proj"]) < 1:
            raise ConfigError("encoder_dim and d_proj must be >= 1")

    # -- io ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        raw = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                outer, inner = key.split(".", 1)
                raw[outer][inner] = value
            else:
                raw[key] = value
        return ExperimentConfig(raw)
