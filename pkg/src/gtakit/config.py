"""Run configuration: sectioned ``key = value`` files plus flag overrides."""
from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .model import VARIANT_ALIASES, ModelConfig, TrainConfig

log = logging.getLogger(__name__)

# section -> {config key: dataclass field name}
_MODEL_KEYS = {f.name: f.name for f in dataclasses.fields(ModelConfig) if f.name != "seed"}
_TRAIN_KEYS = {f.name: f.name for f in dataclasses.fields(TrainConfig)
               if f.name not in ("seed", "train_data", "test_data")}
SECTIONS = {
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "data": {"train": "train_data", "test": "test_data"},
    "run": {"seed": "seed", "scale": "scale"},
}
SCALES = ("desk", "full")


def default_token_dim(variant: str, scale: str = "desk") -> int:
    """Width when none is configured: GTA needs a multiple of 3, Kronecker of 16."""
    if variant == "gta_kron":
        return 128 if scale == "desk" else 512
    if scale == "full":
        return 510 if variant in ("gta", "gta_euclid") else 512
    return 126


class ConfigError(ValueError):
    pass


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw.strip()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    scale: str = "desk"

    def flat(self) -> dict:
        out = {}
        for key, name in SECTIONS["model"].items():
            out[f"model.{key}"] = getattr(self.model, name)
        for key, name in SECTIONS["train"].items():
            out[f"train.{key}"] = getattr(self.train, name)
        out["data.train"] = self.train.train_data
        out["data.test"] = self.train.test_data
        out["run.seed"] = self.seed
        out["run.scale"] = self.scale
        return out

    def to_ini(self) -> str:
        lines = []
        current = None
        for k, v in self.flat().items():
            sec, key = k.split(".", 1)
            if sec != current:
                lines.append(f"{'' if current is None else chr(10)}[{sec}]")
                current = sec
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def log_resolved(self, logger: Optional[logging.Logger] = None) -> None:
        logger = logger or log
        for k, v in self.flat().items():
            logger.info("config %s = %s", k, v)


def parse_pairs(pairs: Iterable[tuple]) -> RunConfig:
    """Build a config from ``("section.key", "value")`` pairs; later pairs win."""
    model_defaults = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    train_defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    mvals, tvals, run = {}, {}, {"seed": 0, "scale": "desk"}
    for full, raw in pairs:
        if "." not in full:
            raise ConfigError(f"key {full!r} lacks a section")
        sec, key = full.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        if key not in SECTIONS[sec]:
            raise ConfigError(f"unknown key {key!r} in [{sec}]")
        name = SECTIONS[sec][key]
        if sec == "model":
            mvals[name] = _coerce(raw, model_defaults[name], full)
        elif sec in ("train", "data"):
            tvals[name] = _coerce(raw, train_defaults[name], full)
        else:
            run[key] = _coerce(raw, run[key], full)
    if run["scale"] not in SCALES:
        raise ConfigError(f"run.scale must be one of {SCALES}")
    try:
        if "token_dim" not in mvals:
            variant = VARIANT_ALIASES.get(mvals.get("variant", "gta"))
            if variant is None:
                raise ValueError(f"unknown variant {mvals['variant']!r}")
            mvals["token_dim"] = default_token_dim(variant, run["scale"])
        model = ModelConfig(seed=run["seed"], **mvals)
        train = TrainConfig(seed=run["seed"], **tvals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model, train, run["seed"], run["scale"])


def read_pairs(path) -> list:
    """``(section.key, value)`` pairs from a config file, in file order."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"{path}: keys outside a section are not allowed")
    return [(f"{sec}.{k}", v) for sec in cp.sections() for k, v in cp.items(sec)]


def load_config(path=None, overrides: Iterable[tuple] = ()) -> RunConfig:
    pairs = []
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        pairs += read_pairs(path)
    pairs += list(overrides)
    return parse_pairs(pairs)


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not section.key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()
