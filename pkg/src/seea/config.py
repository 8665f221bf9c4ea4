"""Run configuration files.

Format: INI sections ``[run] [env] [search] [optim] [model] [rm]`` holding
``key = value`` lines whose keys are the dataclass field names. Anything not
set falls back to the chosen preset. Precedence, lowest first::

    preset  <  config file  <  SEEA_<SECTION>__<KEY> environment variables  <  CLI flags

``[run] preset = fast`` inside a file selects the preset it builds on.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import math
import os
import re
from pathlib import Path

from seea import env as E
from seea import evolve as V
from seea import mcts as M
from seea import optim as O
from seea.env import ConfigError

SECTIONS = {
    "run": V.RunConfig,
    "env": E.EnvConfig,
    "search": M.SearchConfig,
    "optim": O.OptimConfig,
    "model": V.ModelConfig,
    "rm": V.RewardModelConfig,
}
NESTED = ("env", "search", "optim", "model", "rm")
ENV_PREFIX = "SEEA_"

PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "default": {},
    # small budgets for tests and laptops
    "fast": {
        "run": {"iterations": 20, "eval_episodes": 100, "expected_groups_per_episode": 0.1},
        "optim": {
            "valid_samples_per_iteration": 64,
            "batch_size": 64,
            "optimizer": "adam",
            "lr0": 0.03,
            "steps_per_iter": 40,
            "schedule": "constant",
        },
        "rm": {"calib_every": 50, "sft_episodes": 150, "sft_steps": 300, "eval_episodes": 120},
    },
    # the LLM-scale learning rate, kept for reference
    "paper-scale": {"optim": {"lr0": 1e-6}},
}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in NESTED}


def _coerce(raw: str, current, where: str):
    text = raw.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, enum.Enum):
            return type(current)(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            kinds = [k.strip() for k in text.split(",") if k.strip()]
            return tuple(E.TaskKind(k) for k in kinds)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def _apply(config: V.RunConfig, section: str, values: dict, where) -> V.RunConfig:
    cls = SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"{where(section, None)}: unknown section [{section}]")
    target = config if section == "run" else getattr(config, section)
    known = _fields(cls)
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
        current = getattr(target, key)
        changes[key] = raw if not isinstance(raw, str) else _coerce(raw, current, where(section, key))
    target = dataclasses.replace(target, **changes)
    return target if section == "run" else dataclasses.replace(config, **{section: target})


def preset(name: str) -> V.RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    config = V.RunConfig()
    for section, values in PRESETS[name].items():
        config = _apply(config, section, values, lambda s, k: f"preset {name}")
    return config


def _line_finder(text: str, path: str):
    lines = text.splitlines()

    def where(section: str, key: str | None) -> str:
        current = None
        for i, line in enumerate(lines, 1):
            s = line.strip()
            m = re.match(r"\[(.+)\]$", s)
            if m:
                current = m.group(1).strip()
                if key is None and current == section:
                    return f"{path}:{i}"
                continue
            if current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return f"{path}:{i}"
        return path

    return where


def parse_text(text: str, path: str = "<config>", base: str | None = None) -> V.RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__", inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    where = _line_finder(text, path)
    chosen = base
    if parser.has_option("run", "preset"):
        chosen = parser.get("run", "preset").strip()
    config = preset(chosen or "default")
    for section in parser.sections():
        values = {k: v for k, v in parser.items(section) if not (section == "run" and k == "preset")}
        config = _apply(config, section, values, where)
    return config


def load(path=None, *, base: str | None = None, environ=None, overrides: dict | None = None) -> V.RunConfig:
    """Resolve a RunConfig through every override layer, then validate."""
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from None
        config = parse_text(text, str(p), base)
    else:
        config = preset(base or "default")
    config = apply_environment(config, os.environ if environ is None else environ)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        config = _apply(config, section, {key: value}, lambda s, k: f"override {s}.{k}")
    config.validate()
    return config


def apply_environment(config: V.RunConfig, environ) -> V.RunConfig:
    """``SEEA_OPTIM__LR0=0.01`` sets ``[optim] lr0``; keys are case-insensitive."""
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX) :].lower().split("__", 1)
        if section in SECTIONS:
            key = {k.lower(): k for k in _fields(SECTIONS[section])}.get(key, key)
        config = _apply(config, section, {key: environ[name]}, lambda s, k: f"environment {name}")
    return config


def _render(value) -> str:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def dump(config: V.RunConfig) -> str:
    """Every setting, in file syntax; ``parse_text(dump(c)) == c``."""
    out = []
    for section, cls in SECTIONS.items():
        target = config if section == "run" else getattr(config, section)
        out.append(f"[{section}]")
        out.extend(f"{name} = {_render(getattr(target, name))}" for name in _fields(cls))
        out.append("")
    return "\n".join(out)
