"""Strict JSON experiment configuration.

One integer ``seed`` drives everything.  Component seeds are ``seed + offset``
with the fixed offsets in :data:`SEED_OFFSETS`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .hblock import HBlockConfig
from .models import BackboneSpec, InsertionPlan, PRESETS
from .synth import XorTaskConfig
from .tensor import ConfigurationError, resolve_dtype
from .train import TrainConfig

SEED_OFFSETS = {"data": 1000, "init": 2000, "train": 3000, "shuffle": 4000}


def sub_seed(seed: int, stream: str) -> int:
    return int(seed) + SEED_OFFSETS[stream]


class ConfigError(ConfigurationError):
    pass


def _strict(section: str, raw: Any, allowed: set[str]) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return raw


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


@dataclass(frozen=True)
class HBlockSection:
    kernel: str = "3x3x3"
    context: str = "5x5x5"
    generator: str = "convnet"
    activation: str = "softmax"
    residual: bool = True

    def config(self, channels: int = 1) -> HBlockConfig:
        return HBlockConfig(channels, self.kernel, self.context, self.generator, self.activation, self.residual)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dtype: str = "f64"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    insertion: dict = field(default_factory=lambda: {"preset": "1-block"})
    hblock: HBlockSection = field(default_factory=HBlockSection)
    data: dict = field(default_factory=lambda: {"xor": {}})
    train: dict = field(default_factory=dict)

    # -- derived objects

    @property
    def np_dtype(self):
        return resolve_dtype(self.dtype)

    def plan(self) -> InsertionPlan:
        hb = self.hblock.config()
        if "preset" in self.insertion:
            return InsertionPlan.preset(self.insertion["preset"], hb)
        return InsertionPlan(tuple(tuple(s) for s in self.insertion["sites"]), hb)

    def xor_task(self) -> XorTaskConfig:
        return XorTaskConfig(**{**self.data.get("xor", {}), "seed": sub_seed(self.seed, "data")})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": sub_seed(self.seed, "train")})

    def to_dict(self) -> dict:
        bb = dataclasses.asdict(self.backbone)
        bb["blocks"] = list(bb["blocks"])
        bb["input_shape"] = list(bb["input_shape"])
        data = dict(self.data)
        if "xor" in data:
            xor = dataclasses.asdict(self.xor_task())
            xor.pop("seed")
            xor["clip_shape"] = list(xor["clip_shape"])
            data["xor"] = xor
        train = dataclasses.asdict(self.train_config())
        train.pop("seed")
        train["lr_steps"] = list(train["lr_steps"])
        insertion = dict(self.insertion)
        if "sites" in insertion:
            insertion["sites"] = [list(s) for s in insertion["sites"]]
        return {
            "seed": self.seed,
            "dtype": self.dtype,
            "backbone": bb,
            "insertion": insertion,
            "hblock": dataclasses.asdict(self.hblock),
            "data": data,
            "train": train,
        }

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "config.resolved.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a decoded JSON document; unknown keys and off-menu values raise :class:`ConfigError`."""
    raw = _strict("root", raw, {"seed", "dtype", "backbone", "insertion", "hblock", "data", "train"})
    try:
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        dtype = raw.get("dtype", "f64")
        resolve_dtype(dtype)

        bb = dict(_strict("backbone", raw.get("backbone", {}), _fields(BackboneSpec)))
        for key in ("blocks", "input_shape"):
            if key in bb:
                bb[key] = tuple(bb[key])
        backbone = BackboneSpec(**bb)
        if backbone.norm not in ("batch", "off"):
            raise ConfigError(f"backbone.norm must be 'batch' or 'off', got {backbone.norm!r}")

        ins = _strict("insertion", raw.get("insertion", {"preset": "1-block"}), {"preset", "sites"})
        if len(ins) != 1:
            raise ConfigError("insertion needs exactly one of 'preset' or 'sites'")
        if "preset" in ins and ins["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {ins['preset']!r}; expected one of {tuple(PRESETS)}")

        hb = HBlockSection(**_strict("hblock", raw.get("hblock", {}), _fields(HBlockSection)))
        hb.config()

        data = _strict("data", raw.get("data", {"xor": {}}), {"xor", "path"})
        if len(data) != 1:
            raise ConfigError("data needs exactly one of 'xor' or 'path'")
        if "xor" in data:
            xor = dict(_strict("data.xor", data["xor"], _fields(XorTaskConfig, exclude=("seed",))))
            if "clip_shape" in xor:
                xor["clip_shape"] = tuple(xor["clip_shape"])
            data = {"xor": xor}

        train = dict(_strict("train", raw.get("train", {}), _fields(TrainConfig, exclude=("seed",))))
        if "lr_steps" in train:
            train["lr_steps"] = tuple(train["lr_steps"])

        cfg = ExperimentConfig(seed, dtype, backbone, dict(ins), hb, data, train)
        cfg.plan()
        if "xor" in data:
            cfg.xor_task()
        cfg.train_config()
        return cfg
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
