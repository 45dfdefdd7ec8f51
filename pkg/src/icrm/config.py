"""Run configuration: typed options merged from flags, a key=value file and defaults.

Precedence is flags > file > ``ICRM_SEED`` (seed only) > defaults. The merged
result is echoed as a key=value file that reproduces the run when fed back.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

SEED_ENV = "ICRM_SEED"


class ConfigError(ValueError):
    pass


def to_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def to_floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value if isinstance(value.value, str) else value.name
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[Any], Any] = str
    default: Any = None
    help: str = ""
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"config line {n}: expected key=value")
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


class RunConfig:
    """Effective configuration of one subcommand invocation."""

    def __init__(self, command: str, options: Sequence[Option], flags: Mapping[str, Any],
                 file_values: Optional[Mapping[str, str]] = None,
                 environ: Optional[Mapping[str, str]] = None):
        self.command = command
        self.options = tuple(options)
        known = {o.key for o in self.options}
        file_values = dict(file_values or {})
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        environ = os.environ if environ is None else environ
        self.values: dict[str, Any] = {}
        self.sources: dict[str, str] = {}
        for o in self.options:
            raw, source = o.default, "default"
            if o.key == "seed" and environ.get(SEED_ENV, "").strip():
                raw, source = environ[SEED_ENV], "env"
            if o.key in file_values:
                raw, source = file_values[o.key], "file"
            if flags.get(o.key) is not None:
                raw, source = flags[o.key], "flag"
            if raw is None or (source == "file" and raw == ""):
                if o.required:
                    raise ConfigError(f"{o.flag} is required")
                value = None
            else:
                try:
                    value = o.parse(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{o.flag}: {exc}") from None
            self.values[o.key] = value
            self.sources[o.key] = source

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def echo(self) -> str:
        lines = [f"# icrm {self.command}: effective configuration"]
        lines += [f"{o.key}={_format(self.values[o.key])}" for o in self.options]
        return "\n".join(lines) + "\n"
