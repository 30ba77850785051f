"""Line-oriented run configuration.

Format::

    # comment
    alpha = 16            # keys outside a section resolve by unique name
    [env]
    n_agents = 3
    [train]
    M = inf               # alias of train.clip_scale

Sections: ``env`` (EnvConfig), ``train`` (TrainConfig), ``data`` (dataset
generation), ``run`` (seeds, output directory, dataset path). Every field has
a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..algo.train import TrainConfig
from ..env import EnvConfig

CONFIG_FILENAME = "config.ini"
ALIASES = {"m": ("train", "clip_scale")}


class ConfigError(ValueError):
    """Bad configuration text; carries the offending key and 1-based line."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key, self.line = key, line


@dataclass(frozen=True)
class DataConfig:
    tier: str = "medium"
    n_episodes: int = 200
    noise_std: float = 0.1
    seed: int = 0


def default_out_dir() -> str:
    return os.environ.get("B3C_OUT_DIR", "runs")


@dataclass(frozen=True)
class RunSection:
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = field(default_factory=default_out_dir)
    dataset: str = ""


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    def replace(self, section: str, **changes) -> "RunConfig":
        new = dataclasses.replace(self)
        setattr(new, section, dataclasses.replace(getattr(self, section), **changes))
        return new


SECTIONS = {"env": EnvConfig, "train": TrainConfig, "data": DataConfig, "run": RunSection}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _convert(raw: str, typ, key: str, line: int | None):
    def bad(expected):
        return ConfigError(f"expected {expected}, got {raw!r}", key, line)

    args = typing.get_args(typ)
    if type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        typ = next(a for a in args if a is not type(None))
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise bad("a boolean")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise bad("an integer") from None
    if typ is float:
        try:
            v = float(raw)
        except ValueError:
            raise bad("a real number") from None
        if math.isnan(v):
            raise bad("a real number")
        return v
    if typ is str:
        return raw
    if typ is tuple or typing.get_origin(typ) is tuple:
        try:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        except ValueError:
            raise bad("a comma-separated list of integers") from None
    raise bad(f"a value of type {typ}")  # pragma: no cover


def _resolve(section: str | None, key: str, line: int) -> tuple[str, str]:
    low = key.lower()
    if low in ALIASES:
        sec, name = ALIASES[low]
        if section not in (None, sec):
            raise ConfigError(f"alias belongs to section [{sec}]", key, line)
        return sec, name
    if section is not None:
        if key not in _field_types(SECTIONS[section]):
            raise ConfigError(f"unknown key in section [{section}]", key, line)
        return section, key
    owners = [s for s, cls in SECTIONS.items() if key in _field_types(cls)]
    if not owners:
        raise ConfigError("unknown key", key, line)
    if len(owners) > 1:
        raise ConfigError(f"ambiguous key, qualify it with one of {owners}", key, line)
    return owners[0], key


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse configuration text on top of ``base`` (defaults when omitted)."""
    values: dict[str, dict[str, tuple]] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", line=lineno)
        sec, name = _resolve(section, key, lineno)
        values[sec][name] = (value, key, lineno)
    return _build(values, base or RunConfig())


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` or ``key=value`` strings (command-line ``--set``)."""
    values: dict[str, dict[str, tuple]] = {s: {} for s in SECTIONS}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        section, name = key.split(".", 1) if "." in key else (None, key)
        if section is not None and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", key)
        sec, name = _resolve(section, name, None)
        values[sec][name] = (value, key, None)
    return _build(values, config)


def _build(values, base: RunConfig) -> RunConfig:
    out = {}
    for sec, cls in SECTIONS.items():
        types = _field_types(cls)
        current = getattr(base, sec)
        changes = {name: _convert(raw, types[name], key, line) for name, (raw, key, line) in values[sec].items()}
        try:
            out[sec] = dataclasses.replace(current, **changes)
        except ValueError as exc:
            # range checks live in the dataclasses; point at the first changed key
            blame = _blame(values[sec], str(exc))
            raise ConfigError(str(exc), *blame) from None
    cfg = RunConfig(**out)
    _check_data(cfg, values["data"])
    return cfg


def _blame(entries: dict, message: str) -> tuple:
    for name, (_, key, line) in entries.items():
        if name in message or key in message:
            return key, line
    if entries:
        _, key, line = next(iter(entries.values()))
        return key, line
    return None, None


def _check_data(cfg: RunConfig, entries: dict) -> None:
    from ..algo.tiers import TIER_NAMES

    d = cfg.data
    for name, ok, msg in (
        ("tier", d.tier in TIER_NAMES, f"tier must be one of {TIER_NAMES}"),
        ("n_episodes", d.n_episodes >= 1, "n_episodes must be >= 1"),
        ("noise_std", d.noise_std >= 0, "noise_std must be >= 0"),
    ):
        if not ok:
            _, key, line = entries.get(name, (None, name, None))
            raise ConfigError(msg, key, line)
    if not cfg.run.seeds:
        raise ConfigError("seed list must not be empty", "seeds")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Every resolved value, in a form ``parse_config`` reads back unchanged."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text)


def echo_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILENAME
    path.write_text(format_config(cfg))
    return path
