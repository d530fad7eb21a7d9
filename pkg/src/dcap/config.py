"""Plain ``key = value`` run configuration files.

One file drives corpus synthesis, model construction, training and evaluation.
Lines starting with ``#`` are comments; tuple values are comma-separated.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .detector import ModelConfig, TrainConfig
from .errors import ConfigError


@dataclass
class EvalConfig:
    conf_thresh: float = 0.001
    iou_thresh: float = 0.45


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_text(self) -> str:
        lines = []
        for key, (section, attr) in sorted(KEYS.items()):
            value = getattr(getattr(self, section), attr)
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _keys():
    keys = {}
    for f in dataclasses.fields(ModelConfig):
        keys[f.name] = ("model", f.name)
    for f in dataclasses.fields(SynthSpec):
        if f.name in ("seed", "image_size"):
            continue
        keys[f.name] = ("synth", f.name)
    keys["data_seed"] = ("synth", "seed")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        keys[f.name] = ("train", f.name)
    for f in dataclasses.fields(EvalConfig):
        keys[f.name] = ("eval", f.name)
    return keys


# config key -> (section, attribute)
KEYS = _keys()


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if default is None or isinstance(default, float):
            if raw.lower() == "none":
                return None
            return float(raw)
        if isinstance(default, int):
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        section, attr = KEYS[key]
        target = getattr(cfg, section)
        setattr(target, attr, _convert(value, getattr(target, attr), key))
    cfg.model.__post_init__()
    cfg.synth.image_size = cfg.model.image_size
    if cfg.train.seed != cfg.model.seed:
        cfg.train.seed = cfg.model.seed
    cfg.model.validate()
    cfg.synth.validate()
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1 or cfg.train.lr < 0:
        raise ConfigError("epochs must be >= 0, batch_size >= 1, lr >= 0")
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_run_config(text, str(path))
