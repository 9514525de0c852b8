"""Run configuration: defaults, then an INI file, then command-line flags.

File format (``configparser`` INI, ``#`` or ``;`` comments)::

    [sim]
    seed = 3
    noise = 0.35

    [model]
    d_model = 64
    blocks = 6

    [train]
    steps = 600

    [infer]
    mode = trigger-actor
    refractory = 6

    [run]
    seed = 0
    episodes = 2000

Every resolved key remembers where its value came from.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .inference import EngineConfig
from .model import ModelConfig
from .sim import SimConfig
from .trainer import TrainConfig

SECTIONS: dict[str, type] = {
    "sim": SimConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "infer": EngineConfig,
}

RUN_DEFAULTS: dict[str, Any] = {"seed": None, "episodes": 2000, "target_threshold": 0.5}

# keys a global --seed fans out to, unless set explicitly
SEEDED = (("sim", "seed"), ("train", "seed"), ("infer", "seed"))


def _coerce(raw: Any, default: Any, key: str):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        return raw
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if default is None:
            return int(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        rc = cls()
        for name, klass in SECTIONS.items():
            rc.values[name] = _defaults(klass)
        rc.values["run"] = dict(RUN_DEFAULTS)
        for sec, kv in rc.values.items():
            for k in kv:
                rc.provenance[f"{sec}.{k}"] = "default"
        return rc

    def set(self, dotted: str, raw: Any, source: str) -> None:
        sec, _, key = dotted.partition(".")
        if sec not in self.values or key not in self.values[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = self.values[sec][key]
        self.values[sec][key] = _coerce(raw, default, dotted)
        self.provenance[dotted] = source

    def load_file(self, path) -> None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from None
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                self.set(f"{sec}.{key}", raw, f"file:{Path(path).name}")

    def apply_seed(self) -> None:
        seed = self.values["run"]["seed"]
        if seed is None:
            return
        for sec, key in SEEDED:
            if self.provenance[f"{sec}.{key}"] == "default":
                self.values[sec][key] = seed
                self.provenance[f"{sec}.{key}"] = "flag:--seed"

    def section(self, name: str):
        klass = SECTIONS[name]
        try:
            return klass(**self.values[name])
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from None

    @property
    def sim(self) -> SimConfig:
        return self.section("sim")

    @property
    def model(self) -> ModelConfig:
        return self.section("model")

    @property
    def train(self) -> TrainConfig:
        return self.section("train")

    @property
    def infer(self) -> EngineConfig:
        return self.section("infer")

    def render(self) -> str:
        lines = []
        for sec, kv in self.values.items():
            lines.append(f"[{sec}]")
            for k, v in kv.items():
                shown = ",".join(v) if isinstance(v, tuple) else getattr(v, "value", v)
                lines.append(f"{k} = {shown}    # {self.provenance[f'{sec}.{k}']}")
            lines.append("")
        return "\n".join(lines)


def resolve(config_file=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then ``config_file``, then ``overrides`` (dotted keys; None skipped)."""
    rc = RunConfig.defaults()
    if config_file:
        rc.load_file(config_file)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        flag = "--" + dotted.split(".", 1)[1].replace("_", "-")
        rc.set(dotted, value, f"flag:{flag}")
    rc.apply_seed()
    for name in SECTIONS:
        rc.section(name)  # validate eagerly
    return rc
