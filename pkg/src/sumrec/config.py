"""Run configuration: an INI-style key = value file shared by every command.

Sections map onto dataclasses:

    [data]   -> SyntheticConfig fields
    [train]  -> TrainConfig fields, plus the four ablation switches
    [serve]  -> host, port

Unknown keys are errors. Command-line flags override file values.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .data import SyntheticConfig
from .encoder import AblationFlags
from .trainer import TrainConfig

FLAG_KEYS = tuple(f.name for f in dataclasses.fields(AblationFlags))


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 selects pipe mode


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def as_dict(self) -> Dict[str, object]:
        return {
            "data": dataclasses.asdict(self.data),
            "train": self.train.as_dict(),
            "serve": dataclasses.asdict(self.serve),
        }


def _coerce(raw: str, typ, key: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(typ), str)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw.strip())
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _update(obj, values: Dict[str, str], section: str):
    types = {f.name: f.type for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"[{section}] unknown key {key!r}")
        changes[key] = _coerce(raw, types[key], f"[{section}] {key}")
    return dataclasses.replace(obj, **changes)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    cfg = RunConfig()
    for section in parser.sections():
        values = dict(parser[section])
        if section == "data":
            cfg.data = _update(cfg.data, values, section)
        elif section == "train":
            flag_values = {k: values.pop(k) for k in list(values) if k in FLAG_KEYS}
            cfg.train = _update(cfg.train, values, section)
            if flag_values:
                cfg.train.flags = _update(cfg.train.flags, flag_values, section)
        elif section == "serve":
            cfg.serve = _update(cfg.serve, values, section)
        else:
            raise ValueError(f"unknown config section [{section}]")
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(p.read_text())
