"""Problem configuration files.

Line-oriented ``key = value`` pairs grouped under ``[section]`` headers.
``#`` starts a comment.  Numeric values may carry a unit suffix (Hz, kHz,
MHz, m, um, nm), converted to SI on read.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

UNITS = {"": 1.0, "hz": 1.0, "khz": 1e3, "mhz": 1e6, "m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9, "pa": 1.0, "gpa": 1e9}
_NUM = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z]*)\s*$")


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.path, self.line = path, line


def parse_quantity(text: str) -> float:
    """'4 um' -> 4e-6; unit-less numbers pass through."""
    m = _NUM.match(text)
    if not m:
        raise ValueError(f"not a number: {text!r}")
    unit = m.group(2).lower()
    if unit not in UNITS:
        raise ValueError(f"unknown unit {m.group(2)!r}")
    return float(m.group(1)) * UNITS[unit]


@dataclass
class Entry:
    value: str
    line: int


@dataclass
class Config:
    """Parsed sections; entries keep their source line for error messages."""

    sections: dict = field(default_factory=dict)  # section -> {key: Entry}
    path: str | None = None

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def entry(self, section: str, key: str) -> Entry:
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"missing key '{key}' in section [{section}]", self.path) from None

    def get(self, section: str, key: str, default=None) -> str | None:
        if not self.has(section, key):
            return default
        return self.sections[section][key].value

    def quantity(self, section: str, key: str, default=None) -> float | None:
        if not self.has(section, key):
            return default
        e = self.entry(section, key)
        try:
            return parse_quantity(e.value)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", self.path, e.line) from None

    def integer(self, section: str, key: str, default=None) -> int | None:
        if not self.has(section, key):
            return default
        e = self.entry(section, key)
        try:
            return int(e.value)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {e.value!r}", self.path, e.line) from None

    def items(self, section: str) -> list:
        return list(self.sections.get(section, {}).items())

    def error(self, section: str, key: str, message: str) -> ConfigError:
        line = self.sections.get(section, {}).get(key)
        return ConfigError(f"[{section}] {key}: {message}", self.path, None if line is None else line.line)


def parse_config(text: str, path: str | None = None) -> Config:
    cfg = Config(path=path)
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {raw.strip()!r}", path, lineno)
            section = line[1:-1].strip().lower()
            cfg.sections.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in cfg.sections[section]:
            raise ConfigError(f"duplicate key '{key}' in [{section}]", path, lineno)
        cfg.sections[section][key] = Entry(value, lineno)
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
